//! Physical microgrid description: unit parameters, network topology,
//! cost weights, and the DC power-flow sensitivity (PTDF) matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("network graph is disconnected")]
    Disconnected,
    #[error("reduced susceptance matrix is singular")]
    SingularSusceptance,
    #[error("invalid grid: {0}")]
    Invalid(String),
}

/// A transmission line between two buses with susceptance in pu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
}

/// Bus assignment of every unit and load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusMap {
    pub conventional: Vec<usize>,
    pub storage: Vec<usize>,
    pub renewable: Vec<usize>,
    pub load: Vec<usize>,
}

/// Microgrid parameters. Immutable after validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_t: usize,
    pub n_s: usize,
    pub n_r: usize,
    pub n_d: usize,
    pub n_e: usize,
    pub p_t_min: Vec<f64>,
    pub p_t_max: Vec<f64>,
    pub p_s_min: Vec<f64>,
    pub p_s_max: Vec<f64>,
    pub p_r_min: Vec<f64>,
    pub p_r_max: Vec<f64>,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub x_soft_min: Vec<f64>,
    pub x_soft_max: Vec<f64>,
    #[serde(rename = "K_t")]
    pub k_t: Vec<f64>,
    #[serde(rename = "K_s")]
    pub k_s: Vec<f64>,
    /// Sample time in hours.
    #[serde(rename = "T_s")]
    pub t_s: f64,
    pub p_e_min: Vec<f64>,
    pub p_e_max: Vec<f64>,
    pub topology: Vec<Line>,
    pub bus_of: BusMap,
    pub c_t: Vec<f64>,
    pub c_t_prime: Vec<f64>,
    pub c_t_prime_prime: Vec<f64>,
    pub c_t_s: Vec<f64>,
    pub c_r: Vec<f64>,
    pub gamma: f64,
}

impl GridSpec {
    /// Total injection dimension n_t + n_s + n_r + n_d.
    pub fn n_inj(&self) -> usize {
        self.n_t + self.n_s + self.n_r + self.n_d
    }

    pub fn bus_count(&self) -> usize {
        let mut max = 0usize;
        for l in &self.topology {
            max = max.max(l.from).max(l.to);
        }
        for &b in self
            .bus_of
            .conventional
            .iter()
            .chain(&self.bus_of.storage)
            .chain(&self.bus_of.renewable)
            .chain(&self.bus_of.load)
        {
            max = max.max(b);
        }
        max + 1
    }

    /// Bus index of injection column `col` in the stacked
    /// `[p_t, p_s, p_r, w_d]` ordering.
    fn bus_of_injection(&self, col: usize) -> usize {
        if col < self.n_t {
            self.bus_of.conventional[col]
        } else if col < self.n_t + self.n_s {
            self.bus_of.storage[col - self.n_t]
        } else if col < self.n_t + self.n_s + self.n_r {
            self.bus_of.renewable[col - self.n_t - self.n_s]
        } else {
            self.bus_of.load[col - self.n_t - self.n_s - self.n_r]
        }
    }

    /// PTDF matrix F mapping the stacked injection vector
    /// `[p_t, p_s, p_r, w_d]` to line flows under the DC approximation.
    /// Flow is positive from a line's from-bus to its to-bus. Bus 0 is the
    /// angle reference; for balanced injections the flows do not depend on
    /// this choice.
    pub fn ptdf_matrix(&self) -> Result<DMatrix<f64>, GridError> {
        let nb = self.bus_count();
        let ne = self.topology.len();
        if !self.is_connected(nb) {
            return Err(GridError::Disconnected);
        }
        // Susceptance Laplacian with line stiffness |b_l|.
        let mut lap = DMatrix::zeros(nb, nb);
        for l in &self.topology {
            let b = l.susceptance.abs();
            if b == 0.0 {
                return Err(GridError::SingularSusceptance);
            }
            lap[(l.from, l.from)] += b;
            lap[(l.to, l.to)] += b;
            lap[(l.from, l.to)] -= b;
            lap[(l.to, l.from)] -= b;
        }
        // Reduce by the reference bus and invert.
        let red = lap.view((1, 1), (nb - 1, nb - 1)).into_owned();
        let inv = red
            .try_inverse()
            .ok_or(GridError::SingularSusceptance)?;
        // Bus-level PTDF: theta = [0; inv * p_red], flow_l = b_l (th_f - th_t).
        let mut bus_ptdf = DMatrix::zeros(ne, nb);
        for (li, l) in self.topology.iter().enumerate() {
            let b = l.susceptance.abs();
            for bus in 1..nb {
                let th_f = if l.from == 0 { 0.0 } else { inv[(l.from - 1, bus - 1)] };
                let th_t = if l.to == 0 { 0.0 } else { inv[(l.to - 1, bus - 1)] };
                bus_ptdf[(li, bus)] = b * (th_f - th_t);
            }
        }
        // Compose with the unit/load-to-bus incidence.
        let mut f = DMatrix::zeros(ne, self.n_inj());
        for col in 0..self.n_inj() {
            let bus = self.bus_of_injection(col);
            for li in 0..ne {
                f[(li, col)] = bus_ptdf[(li, bus)];
            }
        }
        Ok(f)
    }

    fn is_connected(&self, nb: usize) -> bool {
        let mut parent: Vec<usize> = (0..nb).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for l in &self.topology {
            let (a, b) = (find(&mut parent, l.from), find(&mut parent, l.to));
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        (0..nb).all(|b| find(&mut parent, b) == root)
    }

    /// Check all sign/order invariants; returns one message per violation.
    pub fn validate_grid(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check_len = |name: &str, len: usize, want: usize| {
            if len != want {
                v.push(format!("{name} has length {len}, expected {want}"));
            }
        };
        check_len("p_t_min", self.p_t_min.len(), self.n_t);
        check_len("p_t_max", self.p_t_max.len(), self.n_t);
        check_len("p_s_min", self.p_s_min.len(), self.n_s);
        check_len("p_s_max", self.p_s_max.len(), self.n_s);
        check_len("p_r_min", self.p_r_min.len(), self.n_r);
        check_len("p_r_max", self.p_r_max.len(), self.n_r);
        check_len("x_min", self.x_min.len(), self.n_s);
        check_len("x_max", self.x_max.len(), self.n_s);
        check_len("x_soft_min", self.x_soft_min.len(), self.n_s);
        check_len("x_soft_max", self.x_soft_max.len(), self.n_s);
        check_len("K_t", self.k_t.len(), self.n_t);
        check_len("K_s", self.k_s.len(), self.n_s);
        check_len("p_e_min", self.p_e_min.len(), self.n_e);
        check_len("p_e_max", self.p_e_max.len(), self.n_e);
        check_len("topology", self.topology.len(), self.n_e);
        check_len("bus_of.conventional", self.bus_of.conventional.len(), self.n_t);
        check_len("bus_of.storage", self.bus_of.storage.len(), self.n_s);
        check_len("bus_of.renewable", self.bus_of.renewable.len(), self.n_r);
        check_len("bus_of.load", self.bus_of.load.len(), self.n_d);
        check_len("c_t", self.c_t.len(), self.n_t);
        check_len("c_t_prime", self.c_t_prime.len(), self.n_t);
        check_len("c_t_prime_prime", self.c_t_prime_prime.len(), self.n_t);
        check_len("c_t_s", self.c_t_s.len(), self.n_t);
        check_len("c_r", self.c_r.len(), self.n_r);
        if !v.is_empty() {
            return v;
        }
        for t in 0..self.n_t {
            if !(0.0 <= self.p_t_min[t] && self.p_t_min[t] <= self.p_t_max[t]) {
                v.push(format!("conventional unit {t}: need 0 <= p_t_min <= p_t_max"));
            }
        }
        for s in 0..self.n_s {
            if self.p_s_min[s] > 0.0 || self.p_s_max[s] < 0.0 {
                v.push(format!("storage {s}: need p_s_min <= 0 <= p_s_max"));
            }
            let ord = 0.0 <= self.x_min[s]
                && self.x_min[s] <= self.x_soft_min[s]
                && self.x_soft_min[s] <= self.x_soft_max[s]
                && self.x_soft_max[s] <= self.x_max[s];
            if !ord {
                v.push(format!(
                    "storage {s}: need 0 <= x_min <= x_soft_min <= x_soft_max <= x_max"
                ));
            }
            if self.k_s[s] <= 0.0 {
                v.push(format!("storage {s}: K_s must be positive"));
            }
        }
        for r in 0..self.n_r {
            if !(0.0 <= self.p_r_min[r] && self.p_r_min[r] <= self.p_r_max[r]) {
                v.push(format!("renewable {r}: need 0 <= p_r_min <= p_r_max"));
            }
        }
        for t in 0..self.n_t {
            if self.k_t[t] <= 0.0 {
                v.push(format!("conventional unit {t}: K_t must be positive"));
            }
        }
        for e in 0..self.n_e {
            if self.p_e_min[e] > 0.0 || self.p_e_max[e] < 0.0 {
                v.push(format!("line {e}: need p_e_min <= 0 <= p_e_max"));
            }
            if self.topology[e].susceptance == 0.0 {
                v.push(format!("line {e}: zero susceptance"));
            }
        }
        if self.t_s <= 0.0 {
            v.push(format!("T_s {} must be positive", self.t_s));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            v.push(format!("gamma {} outside (0, 1]", self.gamma));
        }
        for (name, w) in [
            ("c_t", &self.c_t),
            ("c_t_prime", &self.c_t_prime),
            ("c_t_prime_prime", &self.c_t_prime_prime),
            ("c_t_s", &self.c_t_s),
            ("c_r", &self.c_r),
        ] {
            if w.iter().any(|&c| c <= 0.0) {
                v.push(format!("{name} entries must be positive"));
            }
        }
        let nb = self.bus_count();
        for &b in self
            .bus_of
            .conventional
            .iter()
            .chain(&self.bus_of.storage)
            .chain(&self.bus_of.renewable)
            .chain(&self.bus_of.load)
        {
            if b >= nb {
                v.push(format!("bus index {b} out of range"));
            }
        }
        if !self.is_connected(nb) {
            v.push("network graph is disconnected".to_string());
        }
        v
    }

    /// The paper's case-study grid: one conventional generator, one storage
    /// unit and one PV plant feeding a load over lines rated 1.3 pu with
    /// susceptance -20 pu each. Half-hour sample time.
    pub fn case_study() -> Self {
        GridSpec {
            n_t: 1,
            n_s: 1,
            n_r: 1,
            n_d: 1,
            n_e: 3,
            p_t_min: vec![0.4],
            p_t_max: vec![1.0],
            p_s_min: vec![-1.0],
            p_s_max: vec![1.0],
            p_r_min: vec![0.0],
            p_r_max: vec![2.0],
            x_min: vec![0.0],
            x_max: vec![4.0],
            x_soft_min: vec![1.0],
            x_soft_max: vec![3.0],
            k_t: vec![1.0],
            k_s: vec![1.0],
            t_s: 0.5,
            p_e_min: vec![-1.3; 3],
            p_e_max: vec![1.3; 3],
            topology: vec![
                Line { from: 0, to: 3, susceptance: -20.0 },
                Line { from: 1, to: 3, susceptance: -20.0 },
                Line { from: 2, to: 3, susceptance: -20.0 },
            ],
            bus_of: BusMap {
                conventional: vec![0],
                storage: vec![1],
                renewable: vec![2],
                load: vec![3],
            },
            c_t: vec![0.1178],
            c_t_prime: vec![0.751],
            c_t_prime_prime: vec![0.0693],
            c_t_s: vec![0.3162],
            c_r: vec![1.0],
            gamma: 0.95,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn two_bus() -> GridSpec {
        let mut g = GridSpec::case_study();
        g.n_t = 1;
        g.n_s = 0;
        g.n_r = 0;
        g.n_d = 1;
        g.n_e = 1;
        g.p_s_min = vec![];
        g.p_s_max = vec![];
        g.p_r_min = vec![];
        g.p_r_max = vec![];
        g.x_min = vec![];
        g.x_max = vec![];
        g.x_soft_min = vec![];
        g.x_soft_max = vec![];
        g.k_s = vec![];
        g.c_r = vec![];
        g.p_e_min = vec![-2.0];
        g.p_e_max = vec![2.0];
        g.topology = vec![Line { from: 0, to: 1, susceptance: -20.0 }];
        g.bus_of = BusMap {
            conventional: vec![0],
            storage: vec![],
            renewable: vec![],
            load: vec![1],
        };
        g
    }

    #[test]
    fn case_study_grid_is_valid() {
        let g = GridSpec::case_study();
        assert!(g.validate_grid().is_empty(), "{:?}", g.validate_grid());
    }

    #[test]
    fn invalid_soft_bounds_rejected() {
        let mut g = GridSpec::case_study();
        g.x_soft_min = vec![3.5];
        assert!(!g.validate_grid().is_empty());
    }

    #[test]
    fn invalid_gamma_rejected() {
        let mut g = GridSpec::case_study();
        g.gamma = 1.2;
        assert!(!g.validate_grid().is_empty());
    }

    #[test]
    fn two_bus_radial_ptdf() {
        let g = two_bus();
        let f = g.ptdf_matrix().unwrap();
        // Bus 0 is the angle reference, so its injection column is zero and
        // the load column carries the full (negated) sensitivity.
        assert_abs_diff_eq!(f[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f[(0, 1)], -1.0, epsilon = 1e-12);
        // Injection 0.7 balanced by the load gives flow 0.7.
        let flow = f[(0, 0)] * 0.7 + f[(0, 1)] * (-0.7);
        assert_abs_diff_eq!(flow, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn three_bus_ring_ptdf() {
        // Ring 0-1, 1-2, 2-0 with equal susceptances; inject +1 at bus 1 and
        // -1 at bus 2. By hand: direct line 1->2 carries 2/3, the path via
        // bus 0 carries 1/3, which is negative in both lines' from->to
        // orientation (power runs 1->0 and 0->2).
        let mut g = two_bus();
        g.n_e = 3;
        g.p_e_min = vec![-2.0; 3];
        g.p_e_max = vec![2.0; 3];
        g.topology = vec![
            Line { from: 0, to: 1, susceptance: -10.0 },
            Line { from: 1, to: 2, susceptance: -10.0 },
            Line { from: 2, to: 0, susceptance: -10.0 },
        ];
        g.bus_of = BusMap {
            conventional: vec![1],
            storage: vec![],
            renewable: vec![],
            load: vec![2],
        };
        let f = g.ptdf_matrix().unwrap();
        let inj = [1.0, -1.0];
        let flows: Vec<f64> = (0..3)
            .map(|l| f[(l, 0)] * inj[0] + f[(l, 1)] * inj[1])
            .collect();
        assert_abs_diff_eq!(flows[0], -1.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(flows[1], 2.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(flows[2], -1.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn colocated_balanced_injection_gives_zero_flow() {
        let mut g = two_bus();
        g.n_t = 2;
        g.n_d = 0;
        g.p_t_min = vec![0.0, 0.0];
        g.p_t_max = vec![1.0, 1.0];
        g.k_t = vec![1.0, 1.0];
        g.c_t = vec![0.1, 0.1];
        g.c_t_prime = vec![0.1, 0.1];
        g.c_t_prime_prime = vec![0.1, 0.1];
        g.c_t_s = vec![0.1, 0.1];
        g.bus_of = BusMap {
            conventional: vec![0, 0],
            storage: vec![],
            renewable: vec![],
            load: vec![],
        };
        let f = g.ptdf_matrix().unwrap();
        let flow = f[(0, 0)] * 0.4 + f[(0, 1)] * (-0.4);
        assert_abs_diff_eq!(flow, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn disconnected_graph_rejected() {
        let mut g = two_bus();
        g.bus_of.load = vec![2];
        assert!(matches!(g.ptdf_matrix(), Err(GridError::Disconnected)));
        assert!(!g.validate_grid().is_empty());
    }

    #[test]
    fn ptdf_superposition_and_flow_conservation() {
        let g = GridSpec::case_study();
        let f = g.ptdf_matrix().unwrap();
        let n = g.n_inj();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            // Random balanced injections.
            let mut p1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut p2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m1 = p1.iter().sum::<f64>() / n as f64;
            let m2 = p2.iter().sum::<f64>() / n as f64;
            p1.iter_mut().for_each(|x| *x -= m1);
            p2.iter_mut().for_each(|x| *x -= m2);
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            for l in 0..g.n_e {
                let fl1: f64 = (0..n).map(|c| f[(l, c)] * p1[c]).sum();
                let fl2: f64 = (0..n).map(|c| f[(l, c)] * p2[c]).sum();
                let mixed: f64 = (0..n).map(|c| f[(l, c)] * (a * p1[c] + b * p2[c])).sum();
                assert_abs_diff_eq!(mixed, a * fl1 + b * fl2, epsilon = 1e-9);
            }
            // Flow conservation at every bus.
            let flows: Vec<f64> = (0..g.n_e)
                .map(|l| (0..n).map(|c| f[(l, c)] * p1[c]).sum())
                .collect();
            for bus in 0..g.bus_count() {
                let mut net = 0.0;
                for (li, line) in g.topology.iter().enumerate() {
                    if line.from == bus {
                        net -= flows[li];
                    }
                    if line.to == bus {
                        net += flows[li];
                    }
                }
                let inj: f64 = (0..n)
                    .filter(|&c| g.bus_of_injection(c) == bus)
                    .map(|c| p1[c])
                    .sum();
                assert_abs_diff_eq!(net + inj, 0.0, epsilon = 1e-9);
            }
        }
    }
}
