//! Impulse responses, carrier functions, maximum and marginal carriers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tree::{Branch, Model, NodeId, Opponents};

/// Tables of one agent at one history node, for one opponent mode.
/// Rows of `q` and `g` are indexed by `L - period`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarrierCell {
    pub period: usize,
    pub q: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub mg: Vec<f64>,
    /// Maximizing L (absolute period), ties to the largest.
    pub arg_l: Vec<usize>,
    pub zeta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CarrierTables {
    pub modes: Vec<Opponents>,
    /// `cells[node][mode][agent]`
    cells: Vec<Vec<Vec<Option<CarrierCell>>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

pub(crate) fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

pub(crate) fn pick<R: Rng>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        acc += p;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

/// Signed composite trapezoid from node `from` to node `to` over values `f`
/// on the nodes `x`.
pub fn trapezoid(x: &[f64], f: &[f64], from: usize, to: usize) -> f64 {
    let (lo, hi, sign) = if from <= to { (from, to, 1.0) } else { (to, from, -1.0) };
    let mut acc = 0.0;
    for j in lo..hi {
        acc += 0.5 * (x[j + 1] - x[j]) * (f[j] + f[j + 1]);
    }
    sign * acc
}

impl CarrierTables {
    pub fn build(model: &Model, modes: Vec<Opponents>) -> Result<Self> {
        let n_nodes = model.tree.len();
        let mut cells: Vec<Vec<Vec<Option<CarrierCell>>>> =
            vec![vec![vec![None; model.agents()]; modes.len()]; n_nodes];
        for t in (1..=model.horizon()).rev() {
            let built: Vec<Result<Vec<Vec<Option<CarrierCell>>>>> = model.map_layer(t, |node| {
                let mut per_mode = Vec::with_capacity(modes.len());
                for (m, opp) in modes.iter().enumerate() {
                    let mut per_agent = vec![None; model.agents()];
                    for i in model.tree.node(node).present_agents() {
                        per_agent[i] = Some(build_cell(model, &cells, m, opp, i, node)?);
                    }
                    per_mode.push(per_agent);
                }
                Ok(per_mode)
            });
            for (&node, res) in model.tree.layer(t).iter().zip(built) {
                cells[node] = res?;
            }
        }
        Ok(CarrierTables { modes, cells })
    }

    pub fn obedient(model: &Model) -> Result<Self> {
        Self::build(model, vec![Opponents::Obedient])
    }

    pub fn mode_index(&self, opp: &Opponents) -> Option<usize> {
        self.modes.iter().position(|m| m == opp)
    }

    pub fn cell(&self, mode: usize, node: NodeId, agent: usize) -> Option<&CarrierCell> {
        self.cells[node][mode][agent].as_ref()
    }

    fn require(&self, mode: usize, node: NodeId, agent: usize) -> Result<&CarrierCell> {
        self.cell(mode, node, agent).ok_or(Error::NotParticipating { agent })
    }

    /// Exact impulse response with first action `action` at grid state `state`.
    pub fn impulse_response(
        &self,
        model: &Model,
        mode: usize,
        agent: usize,
        node: NodeId,
        action: usize,
        state: usize,
        l: usize,
    ) -> Result<f64> {
        let k = model.tree.node(node).period;
        check_l(model, k, l)?;
        let v = model.game.grid(agent, k).value(state);
        let brs = branches_checked(model, &self.modes[mode], agent, node, action)?;
        q_first(model, &self.cells, mode, agent, k, &brs, v, l)
    }

    /// Carrier value. `action = None` or the obedient action selects the
    /// obedient branch; any other menu action freezes the first action.
    pub fn carrier_g(
        &self,
        model: &Model,
        mode: usize,
        agent: usize,
        node: NodeId,
        action: Option<usize>,
        state: usize,
        l: usize,
    ) -> Result<f64> {
        let k = model.tree.node(node).period;
        check_l(model, k, l)?;
        let cell = self.require(mode, node, agent)?;
        let menu = model.tree.node(node).menu(agent).unwrap();
        match action {
            Some(a) if a != menu.state_action[state] => {
                let theta = model.theta(agent, k);
                self.frozen_integral(model, mode, agent, node, a, theta, state, l)
            }
            _ => Ok(cell.g[l - k][state]),
        }
    }

    /// `∫_{from}^{to} q(a, v, L) dv` with the first action frozen at `action`.
    #[allow(clippy::too_many_arguments)]
    pub fn frozen_integral(
        &self,
        model: &Model,
        mode: usize,
        agent: usize,
        node: NodeId,
        action: usize,
        from: usize,
        to: usize,
        l: usize,
    ) -> Result<f64> {
        let k = model.tree.node(node).period;
        check_l(model, k, l)?;
        let brs = branches_checked(model, &self.modes[mode], agent, node, action)?;
        let grid = model.game.grid(agent, k);
        let (lo, hi, sign) = if from <= to { (from, to, 1.0) } else { (to, from, -1.0) };
        let r = model.refinement;
        let mut acc = 0.0;
        for j in lo..hi {
            let (x0, x1) = (grid.value(j), grid.value(j + 1));
            let h = (x1 - x0) / r as f64;
            let mut prev = q_first(model, &self.cells, mode, agent, k, &brs, x0, l)?;
            for u in 1..=r {
                let v = if u == r { x1 } else { x0 + h * u as f64 };
                let cur = q_first(model, &self.cells, mode, agent, k, &brs, v, l)?;
                acc += 0.5 * h * (prev + cur);
                prev = cur;
            }
        }
        Ok(sign * acc)
    }

    /// Obedient-branch integral of q between two grid nodes.
    pub fn obedient_integral(&self, model: &Model, mode: usize, agent: usize, node: NodeId, from: usize, to: usize, l: usize) -> Result<f64> {
        let k = model.tree.node(node).period;
        check_l(model, k, l)?;
        let cell = self.require(mode, node, agent)?;
        Ok(cell.g[l - k][to] - cell.g[l - k][from])
    }

    pub fn max_carrier(
        &self,
        model: &Model,
        mode: usize,
        agent: usize,
        node: NodeId,
        action: Option<usize>,
        state: usize,
    ) -> Result<(f64, usize)> {
        let k = model.tree.node(node).period;
        let mut best = (f64::NEG_INFINITY, k);
        for l in k..=model.horizon() {
            let g = self.carrier_g(model, mode, agent, node, action, state, l)?;
            if g >= best.0 {
                best = (g, l);
            }
        }
        Ok(best)
    }

    pub fn marginal_carrier(&self, mode: usize, agent: usize, node: NodeId, state: usize) -> Result<f64> {
        Ok(self.require(mode, node, agent)?.zeta[state])
    }

    /// Maximum carrier of a mixture of opponent modes with the given weights.
    pub fn mixture_max_carrier(&self, weights: &[(usize, f64)], agent: usize, node: NodeId, state: usize) -> Result<(f64, usize)> {
        let first = self.require(weights[0].0, node, agent)?;
        let k = first.period;
        let mut best = (f64::NEG_INFINITY, k);
        for row in 0..first.g.len() {
            let mut g = 0.0;
            for &(m, w) in weights {
                g += w * self.require(m, node, agent)?.g[row][state];
            }
            if g >= best.0 {
                best = (g, k + row);
            }
        }
        Ok(best)
    }

    /// Monte Carlo impulse responses for every `L` from one set of paths.
    #[allow(clippy::too_many_arguments)]
    pub fn impulse_response_mc(
        &self,
        model: &Model,
        mode: usize,
        agent: usize,
        node: NodeId,
        action: usize,
        state: usize,
        samples: usize,
        seed: u64,
    ) -> Result<Vec<McEstimate>> {
        let k0 = model.tree.node(node).period;
        let horizon = model.horizon();
        branches_checked(model, &self.modes[mode], agent, node, action)?;
        let opp = &self.modes[mode];
        let paths: Vec<Result<Vec<f64>>> = par::map_range(model.exec, samples, |p| {
            let mut rng = path_rng(seed, p as u64);
            let mut sums = Vec::with_capacity(horizon - k0 + 1);
            let mut cur = node;
            let mut s = model.game.grid(agent, k0).value(state);
            let mut a = action;
            let mut prod = 1.0;
            let mut acc = 0.0;
            for k in k0..=horizon {
                let brs = model.branches(agent, opp, cur, a);
                let b = &brs[pick(&mut rng, brs.iter().map(|b| b.prob))];
                acc += prod * model.game.reward_derivative(agent, k, s, &b.values)?;
                sums.push(acc);
                if k == horizon {
                    break;
                }
                let child = b.child.expect("child exists before the horizon");
                let moves = model.moves_at(agent, child, s, true)?;
                let mv = moves[pick(&mut rng, moves.iter().map(|m| m.prob))];
                prod *= mv.ds;
                cur = child;
                s = model.game.grid(agent, k + 1).value(mv.next);
                a = model.tree.node(cur).menu(agent).unwrap().state_action[mv.next];
            }
            Ok(sums)
        });
        let paths = paths.into_iter().collect::<Result<Vec<_>>>()?;
        let len = horizon - k0 + 1;
        Ok((0..len)
            .map(|row| {
                let n = paths.len() as f64;
                let mean = paths.iter().map(|p| p[row]).sum::<f64>() / n;
                let var = if paths.len() > 1 {
                    paths.iter().map(|p| (p[row] - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                McEstimate { mean, std_err: (var / n).sqrt(), samples: paths.len() }
            })
            .collect())
    }
}

fn check_l(model: &Model, k: usize, l: usize) -> Result<()> {
    if l < k || l > model.horizon() {
        return Err(Error::Period { period: l, horizon: model.horizon() });
    }
    Ok(())
}

fn branches_checked(model: &Model, opp: &Opponents, agent: usize, node: NodeId, action: usize) -> Result<Vec<Branch>> {
    let nd = model.tree.node(node);
    let menu = nd.menu(agent).ok_or(Error::NotParticipating { agent })?;
    if action >= menu.len() {
        return Err(Error::NotInMenu { agent, index: action, size: menu.len() });
    }
    Ok(model.branches(agent, opp, node, action))
}

#[allow(clippy::too_many_arguments)]
fn q_first(
    model: &Model,
    cells: &[Vec<Vec<Option<CarrierCell>>>],
    mode: usize,
    agent: usize,
    k: usize,
    brs: &[Branch],
    v: f64,
    l: usize,
) -> Result<f64> {
    let mut q = 0.0;
    for b in brs {
        q += b.prob * model.game.reward_derivative(agent, k, v, &b.values)?;
    }
    if l > k {
        for b in brs {
            let child = b.child.expect("child exists before the horizon");
            let next = cells[child][mode][agent].as_ref().expect("child cell built");
            let row = &next.q[l - k - 1];
            for mv in model.moves_at(agent, child, v, true)? {
                q += b.prob * mv.prob * mv.ds * row[mv.next];
            }
        }
    }
    Ok(q)
}

fn build_cell(
    model: &Model,
    cells: &[Vec<Vec<Option<CarrierCell>>>],
    mode: usize,
    opp: &Opponents,
    agent: usize,
    node: NodeId,
) -> Result<CarrierCell> {
    let nd = model.tree.node(node);
    let k = nd.period;
    let horizon = model.horizon();
    let grid = model.game.grid(agent, k);
    let m = grid.len();
    let menu = nd.menu(agent).unwrap();
    let brs: Vec<Vec<Branch>> = (0..menu.len()).map(|a| model.branches(agent, opp, node, a)).collect();

    let rows = horizon - k + 1;
    let mut q = vec![vec![0.0; m]; rows];
    for (row, l) in (k..=horizon).enumerate() {
        for s in 0..m {
            q[row][s] = q_first(model, cells, mode, agent, k, &brs[menu.state_action[s]], grid.value(s), l)?;
        }
    }

    let theta = model.theta(agent, k);
    let r = model.refinement;
    let mut g = vec![vec![0.0; m]; rows];
    for (row, l) in (k..=horizon).enumerate() {
        if r == 1 {
            for s in 0..m {
                g[row][s] = trapezoid(grid.nodes(), &q[row], theta, s);
            }
        } else {
            // refined integrand: q at sub-nodes with the nearest node's action
            let mut seg = vec![0.0; m.saturating_sub(1)];
            for (j, slot) in seg.iter_mut().enumerate() {
                let (x0, x1) = (grid.value(j), grid.value(j + 1));
                let h = (x1 - x0) / r as f64;
                let mut prev = q[row][j];
                let mut acc = 0.0;
                for u in 1..=r {
                    let cur = if u == r {
                        q[row][j + 1]
                    } else {
                        let v = x0 + h * u as f64;
                        let a = menu.state_action[grid.snap(v)];
                        q_first(model, cells, mode, agent, k, &brs[a], v, l)?
                    };
                    acc += 0.5 * h * (prev + cur);
                    prev = cur;
                }
                *slot = acc;
            }
            for s in 0..m {
                g[row][s] = if s >= theta {
                    seg[theta..s].iter().sum()
                } else {
                    -seg[s..theta].iter().sum::<f64>()
                };
            }
        }
    }

    let mut mg = vec![f64::NEG_INFINITY; m];
    let mut arg_l = vec![k; m];
    for s in 0..m {
        for (row, l) in (k..=horizon).enumerate() {
            if g[row][s] >= mg[s] {
                mg[s] = g[row][s];
                arg_l[s] = l;
            }
        }
    }

    let mut zeta = mg.clone();
    if k < horizon {
        for s in 0..m {
            let mut next = 0.0;
            for b in &brs[menu.state_action[s]] {
                let child = b.child.expect("child exists before the horizon");
                let c = cells[child][mode][agent].as_ref().expect("child cell built");
                for mv in model.moves(agent, child, s, false) {
                    next += b.prob * mv.prob * c.mg[mv.next];
                }
            }
            zeta[s] = mg[s] - next;
        }
    }
    Ok(CarrierCell { period: k, q, g, mg, arg_l, zeta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_is_signed() {
        let x = [0.0, 0.5, 1.0];
        let f = [1.0, 1.0, 1.0];
        assert_eq!(trapezoid(&x, &f, 0, 2), 1.0);
        assert_eq!(trapezoid(&x, &f, 2, 0), -1.0);
        assert_eq!(trapezoid(&x, &f, 1, 1), 0.0);
    }
}
