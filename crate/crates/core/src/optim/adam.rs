use super::params::PARAM_DIM;

/// Adam moments per Gaussian, each with its own step count so that newly
/// inserted Gaussians get a correct bias correction.
#[derive(Debug, Clone, Default)]
pub(crate) struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<[f64; PARAM_DIM]>,
    v: Vec<[f64; PARAM_DIM]>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![[0.0; PARAM_DIM]; n],
            v: vec![[0.0; PARAM_DIM]; n],
            t: vec![0; n],
        }
    }

    /// Applies one step to `x` in place.
    pub fn step(&mut self, i: usize, x: &mut [f64; PARAM_DIM], g: &[f64; PARAM_DIM], lr: &[f64; PARAM_DIM]) {
        self.t[i] += 1;
        let t = self.t[i] as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for k in 0..PARAM_DIM {
            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            x[k] -= lr[k] * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Rebuilds the state after the map changed; `source[j]` names the old
    /// index whose moments output `j` inherits, `None` for fresh Gaussians.
    pub fn remap(&mut self, source: &[Option<usize>]) {
        let pick = |j: &Option<usize>, old: &Vec<[f64; PARAM_DIM]>| j.map(|i| old[i]).unwrap_or([0.0; PARAM_DIM]);
        self.m = source.iter().map(|j| pick(j, &self.m)).collect();
        self.v = source.iter().map(|j| pick(j, &self.v)).collect();
        self.t = source.iter().map(|j| j.map(|i| self.t[i]).unwrap_or(0)).collect();
    }
}
