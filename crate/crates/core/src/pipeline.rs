//! Table construction in dependency order.

use crate::carrier::CarrierTables;
use crate::equilibrium::ValueTables;
use crate::error::Result;
use crate::mechanism::Mechanism;
use crate::persistence::Transforms;
use crate::synthesis::{synthesize, SynthesisOutput};
use crate::tree::Model;

pub struct Analysis {
    pub model: Model,
    pub carriers: CarrierTables,
    pub transforms: Transforms,
    /// Present when the mechanism was synthesized.
    pub synthesis: Option<SynthesisOutput>,
    pub mechanism: Mechanism,
    pub values: ValueTables,
}

impl Analysis {
    /// Carriers, transforms, the synthesized mechanism and its value tables.
    pub fn synthesized(model: Model, full_cover: bool) -> Result<Self> {
        let carriers = CarrierTables::obedient(&model)?;
        let transforms = Transforms::build(&model, &carriers, full_cover)?;
        let synth = synthesize(&model, &carriers, &transforms)?;
        let mechanism = synth.mechanism();
        let values = ValueTables::obedient(&model, &mechanism)?;
        Ok(Analysis { model, carriers, transforms, synthesis: Some(synth), mechanism, values })
    }

    /// Same tables for a given mechanism.
    pub fn with_mechanism(model: Model, mechanism: Mechanism, full_cover: bool) -> Result<Self> {
        let carriers = CarrierTables::obedient(&model)?;
        let transforms = Transforms::build(&model, &carriers, full_cover)?;
        let values = ValueTables::obedient(&model, &mechanism)?;
        Ok(Analysis { model, carriers, transforms, synthesis: None, mechanism, values })
    }
}
