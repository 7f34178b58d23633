//! Base recommenders mapping a user and an item embedding to a score.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codebook::xavier_uniform;
use crate::rng::Rng;
use crate::table::Table;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Dot,
    Mlp,
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::Dot => "dot",
            ScorerKind::Mlp => "mlp",
        })
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ScorerKind::Dot),
            "mlp" => Ok(ScorerKind::Mlp),
            _ => Err(Error::UnknownName {
                kind: "scorer",
                name: s.to_string(),
            }),
        }
    }
}

/// Fully connected layer, `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Table,
    pub bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            (0..self.weights.rows())
                .map(|r| dot(self.weights.row(r), input) + self.bias[r]),
        );
    }
}

/// Tower on `concat(e_u, e_i)`: ReLU hidden layers, linear scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Hidden layers followed by the output layer.
    pub layers: Vec<Dense>,
    #[serde(skip)]
    version: u64,
}

/// Default hidden widths for embedding width `d`: `2d, d, d/2`.
pub fn default_hidden(dim: usize) -> Vec<usize> {
    vec![2 * dim, dim, (dim / 2).max(1)]
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn new(dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        if dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::Shape(format!("bad MLP widths: input 2×{dim}, hidden {hidden:?}")));
        }
        let mut widths = vec![2 * dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weights: xavier_uniform(w[1], w[0], rng),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Shape("MLP without layers".into()));
        };
        if first.weights.cols() % 2 != 0 {
            return Err(Error::Shape("MLP input width must be even".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weights.rows() {
                return Err(Error::Shape(format!("layer {i} bias width")));
            }
            if i > 0 && layers[i - 1].weights.rows() != layer.weights.cols() {
                return Err(Error::Shape(format!("layer {i} does not chain")));
            }
        }
        if layers.last().map(|l| l.weights.rows()) != Some(1) {
            return Err(Error::Shape("MLP output width must be 1".into()));
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols() / 2
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weights.rows())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scorer {
    Dot,
    Mlp(Mlp),
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    e_u: Vec<f64>,
    e_i: Vec<f64>,
    /// Post-activation output of each hidden layer.
    hidden: Vec<Vec<f64>>,
}

/// Gradient of the loss with respect to the scorer parameters, laid out
/// like [`Scorer::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerGrads {
    pub layers: Vec<(Table, Vec<f64>)>,
}

impl ScorerGrads {
    pub fn zeros_like(scorer: &Scorer) -> Self {
        match scorer {
            Scorer::Dot => Self { layers: Vec::new() },
            Scorer::Mlp(mlp) => Self {
                layers: mlp
                    .layers
                    .iter()
                    .map(|l| (Table::zeros(l.weights.rows(), l.weights.cols()), vec![0.0; l.bias.len()]))
                    .collect(),
            },
        }
    }

    pub fn add_assign(&mut self, other: &ScorerGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in w.as_mut_slice().iter_mut().zip(ow.as_slice()) {
                *x += y;
            }
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.all_finite() && b.iter().all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.as_slice().iter().all(|&x| x == 0.0) && b.iter().all(|&x| x == 0.0))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Scorer {
    pub fn new(kind: ScorerKind, dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        match kind {
            ScorerKind::Dot => Ok(Scorer::Dot),
            ScorerKind::Mlp => Ok(Scorer::Mlp(Mlp::new(dim, hidden, rng)?)),
        }
    }

    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::Dot => ScorerKind::Dot,
            Scorer::Mlp(_) => ScorerKind::Mlp,
        }
    }

    /// Bumped whenever parameters change; forward caches from an older
    /// version are rejected.
    pub fn version(&self) -> u64 {
        match self {
            Scorer::Dot => 0,
            Scorer::Mlp(m) => m.version,
        }
    }

    fn check_widths(&self, e_u: &[f64], e_i: &[f64]) -> Result<()> {
        if e_u.len() != e_i.len() {
            return Err(Error::Shape(format!(
                "user width {} vs item width {}",
                e_u.len(),
                e_i.len()
            )));
        }
        if let Scorer::Mlp(m) = self {
            if e_u.len() != m.input_dim() {
                return Err(Error::Shape(format!(
                    "embedding width {} vs MLP input width {}",
                    e_u.len(),
                    m.input_dim()
                )));
            }
        }
        Ok(())
    }

    /// Score without keeping activations.
    pub fn score_only(&self, e_u: &[f64], e_i: &[f64]) -> f64 {
        match self {
            Scorer::Dot => dot(e_u, e_i),
            Scorer::Mlp(m) => {
                let mut input: Vec<f64> = e_u.iter().chain(e_i).copied().collect();
                let mut out = Vec::new();
                let last = m.layers.len() - 1;
                for (i, layer) in m.layers.iter().enumerate() {
                    layer.forward(&input, &mut out);
                    if i < last {
                        out.iter_mut().for_each(|x| *x = x.max(0.0));
                    }
                    std::mem::swap(&mut input, &mut out);
                }
                input[0]
            }
        }
    }

    pub fn score(&self, e_u: &[f64], e_i: &[f64]) -> Result<(f64, ForwardCache)> {
        self.check_widths(e_u, e_i)?;
        let mut cache = ForwardCache {
            version: self.version(),
            e_u: e_u.to_vec(),
            e_i: e_i.to_vec(),
            hidden: Vec::new(),
        };
        let y = match self {
            Scorer::Dot => dot(e_u, e_i),
            Scorer::Mlp(m) => {
                let mut input: Vec<f64> = e_u.iter().chain(e_i).copied().collect();
                let last = m.layers.len() - 1;
                for layer in &m.layers[..last] {
                    let mut out = Vec::new();
                    layer.forward(&input, &mut out);
                    out.iter_mut().for_each(|x| *x = x.max(0.0));
                    cache.hidden.push(out.clone());
                    input = out;
                }
                let mut out = Vec::new();
                m.layers[last].forward(&input, &mut out);
                out[0]
            }
        };
        Ok((y, cache))
    }

    /// Adds `upstream · ∂ŷ/∂·` into the provided buffers.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache,
        upstream: f64,
        d_eu: &mut [f64],
        d_ei: &mut [f64],
        grads: &mut ScorerGrads,
    ) -> Result<()> {
        if cache.version != self.version() {
            return Err(Error::StaleCache {
                cache: cache.version,
                scorer: self.version(),
            });
        }
        match self {
            Scorer::Dot => {
                for (g, x) in d_eu.iter_mut().zip(&cache.e_i) {
                    *g += upstream * x;
                }
                for (g, x) in d_ei.iter_mut().zip(&cache.e_u) {
                    *g += upstream * x;
                }
            }
            Scorer::Mlp(m) => {
                let d = cache.e_u.len();
                let last = m.layers.len() - 1;
                // delta: gradient w.r.t. the current layer's pre-activation
                let mut delta = vec![upstream];
                for l in (0..=last).rev() {
                    let layer = &m.layers[l];
                    let (gw, gb) = &mut grads.layers[l];
                    let input: Vec<f64> = if l == 0 {
                        cache.e_u.iter().chain(&cache.e_i).copied().collect()
                    } else {
                        cache.hidden[l - 1].clone()
                    };
                    for (r, &dr) in delta.iter().enumerate() {
                        gb[r] += dr;
                        if dr != 0.0 {
                            for (g, x) in gw.row_mut(r).iter_mut().zip(&input) {
                                *g += dr * x;
                            }
                        }
                    }
                    let mut d_input = vec![0.0; layer.weights.cols()];
                    for (r, &dr) in delta.iter().enumerate() {
                        if dr != 0.0 {
                            for (g, w) in d_input.iter_mut().zip(layer.weights.row(r)) {
                                *g += dr * w;
                            }
                        }
                    }
                    if l == 0 {
                        for j in 0..d {
                            d_eu[j] += d_input[j];
                            d_ei[j] += d_input[d + j];
                        }
                    } else {
                        let act = &cache.hidden[l - 1];
                        delta = d_input
                            .iter()
                            .zip(act)
                            .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
                            .collect();
                    }
                }
            }
        }
        Ok(())
    }

    /// `(∂L/∂e_u, ∂L/∂e_i, ∂L/∂Θ)` given `∂L/∂ŷ`.
    pub fn score_backward(
        &self,
        cache: &ForwardCache,
        upstream: f64,
    ) -> Result<(Vec<f64>, Vec<f64>, ScorerGrads)> {
        let d = cache.e_u.len();
        let (mut d_eu, mut d_ei) = (vec![0.0; d], vec![0.0; d]);
        let mut grads = ScorerGrads::zeros_like(self);
        self.accumulate_backward(cache, upstream, &mut d_eu, &mut d_ei, &mut grads)?;
        Ok((d_eu, d_ei, grads))
    }

    /// Flat views of every parameter table, in layer order (weights, bias).
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Scorer::Dot => Vec::new(),
            Scorer::Mlp(m) => {
                m.version += 1;
                m.layers
                    .iter_mut()
                    .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
                    .collect()
            }
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Scorer::Dot => Vec::new(),
            Scorer::Mlp(m) => m
                .layers
                .iter()
                .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Rounds every parameter to f32 precision.
    pub fn round_to_f32(&self) -> Self {
        let mut out = self.clone();
        for p in out.params_mut() {
            p.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }
}

impl ScorerGrads {
    /// Flat views matching [`Scorer::params`].
    pub fn flat(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }
}

/// Scores every row of `items` against one user, reusing the user half of
/// the first MLP layer.
pub struct BatchScorer<'a> {
    scorer: &'a Scorer,
    /// For the MLP: item half of the first layer applied to every item.
    item_proj: Option<Table>,
}

impl<'a> BatchScorer<'a> {
    pub fn new(scorer: &'a Scorer, items: &Table) -> Self {
        let item_proj = match scorer {
            Scorer::Dot => None,
            Scorer::Mlp(m) => {
                let first = &m.layers[0];
                let d = m.input_dim();
                let h = first.weights.rows();
                Some(Table::from_fn(items.rows(), h, |i, r| {
                    dot(&first.weights.row(r)[d..], items.row(i))
                }))
            }
        };
        Self { scorer, item_proj }
    }

    pub fn score_all(&self, e_u: &[f64], items: &Table, out: &mut Vec<f64>) {
        out.clear();
        match (self.scorer, &self.item_proj) {
            (Scorer::Mlp(m), Some(proj)) => {
                let first = &m.layers[0];
                let d = m.input_dim();
                let user_part: Vec<f64> = (0..first.weights.rows())
                    .map(|r| dot(&first.weights.row(r)[..d], e_u) + first.bias[r])
                    .collect();
                let last = m.layers.len() - 1;
                let mut buf = Vec::new();
                for i in 0..items.rows() {
                    let mut input: Vec<f64> = user_part
                        .iter()
                        .zip(proj.row(i))
                        .map(|(a, b)| (a + b).max(0.0))
                        .collect();
                    for (l, layer) in m.layers.iter().enumerate().skip(1) {
                        layer.forward(&input, &mut buf);
                        if l < last {
                            buf.iter_mut().for_each(|x| *x = x.max(0.0));
                        }
                        std::mem::swap(&mut input, &mut buf);
                    }
                    out.push(input[0]);
                }
            }
            _ => out.extend((0..items.rows()).map(|i| dot(e_u, items.row(i)))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, unit_f64, Stream};

    fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| 2.0 * unit_f64(rng) - 1.0).collect()
    }

    #[test]
    fn dot_examples() {
        let (y, cache) = Scorer::Dot.score(&[1.0, 2.0], &[3.0, -1.0]).unwrap();
        assert_eq!(y, 1.0);
        let (du, di, g) = Scorer::Dot.score_backward(&cache, 1.0).unwrap();
        assert_eq!(du, vec![3.0, -1.0]);
        assert_eq!(di, vec![1.0, 2.0]);
        assert!(g.layers.is_empty());
        assert_eq!(Scorer::Dot.score(&[1.0, 2.0], &[0.0, 0.0]).unwrap().0, 0.0);
        assert_eq!(
            Scorer::Dot.score(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0,
            Scorer::Dot.score(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0
        );
    }

    #[test]
    fn width_mismatch() {
        assert!(Scorer::Dot.score(&[1.0], &[1.0, 2.0]).is_err());
        let mlp = Scorer::new(ScorerKind::Mlp, 4, &default_hidden(4), &mut stream(1, Stream::Scorer)).unwrap();
        assert!(mlp.score(&[1.0; 3], &[1.0; 3]).is_err());
    }

    #[test]
    fn zero_mlp_scores_zero() {
        let mut mlp = Scorer::new(ScorerKind::Mlp, 4, &[8, 4, 2], &mut stream(1, Stream::Scorer)).unwrap();
        for p in mlp.params_mut() {
            p.fill(0.0);
        }
        let (y, _) = mlp.score(&[0.3, -1.0, 2.0, 0.5], &[1.0, 1.0, -4.0, 0.0]).unwrap();
        assert_eq!(y, 0.0);
    }

    #[test]
    fn default_tower_shape() {
        let Scorer::Mlp(m) = Scorer::new(ScorerKind::Mlp, 8, &default_hidden(8), &mut stream(1, Stream::Scorer)).unwrap() else {
            unreachable!()
        };
        assert_eq!(m.hidden_widths(), vec![16, 8, 4]);
        assert_eq!(m.layers.len(), 4);
        assert_eq!(m.layers[0].weights.shape(), (16, 16));
        assert!(m.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mlp = Scorer::new(ScorerKind::Mlp, 3, &[6, 3, 2], &mut stream(2, Stream::Scorer)).unwrap();
        let (_, cache) = mlp.score(&[0.1, 0.2, 0.3], &[0.3, -0.2, 0.1]).unwrap();
        let (du, di, g) = mlp.score_backward(&cache, 0.0).unwrap();
        assert!(du.iter().chain(&di).all(|&x| x == 0.0));
        assert!(g.is_zero());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut mlp = Scorer::new(ScorerKind::Mlp, 2, &[4, 2, 1], &mut stream(2, Stream::Scorer)).unwrap();
        let (_, cache) = mlp.score(&[0.1, 0.2], &[0.3, -0.2]).unwrap();
        mlp.params_mut()[0][0] += 0.1;
        assert!(matches!(mlp.score_backward(&cache, 1.0), Err(Error::StaleCache { .. })));
    }

    /// Central differences over inputs and every parameter at random points.
    #[test]
    fn mlp_matches_finite_differences() {
        let h = 1e-5;
        let mut rng = stream(42, Stream::Scorer);
        let d = 4;
        let mut checked = 0;
        for trial in 0..100 {
            let mut mlp = Scorer::new(ScorerKind::Mlp, d, &[8, 4, 2], &mut rng).unwrap();
            // nonzero biases so every code path carries gradient
            for (i, p) in mlp.params_mut().into_iter().enumerate() {
                if i % 2 == 1 {
                    p.iter_mut().for_each(|b| *b = 0.2 * (2.0 * unit_f64(&mut rng) - 1.0));
                }
            }
            let e_u = random_vec(&mut rng, d);
            let e_i = random_vec(&mut rng, d);
            let (_, cache) = mlp.score(&e_u, &e_i).unwrap();
            if min_abs_preactivation(&mlp, &e_u, &e_i) < 1e-6 {
                continue;
            }
            let (du, di, g) = mlp.score_backward(&cache, 1.0).unwrap();
            let f = |s: &Scorer, u: &[f64], i: &[f64]| s.score_only(u, i);
            let close = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-4;
            for j in 0..d {
                let (mut up, mut um) = (e_u.clone(), e_u.clone());
                up[j] += h;
                um[j] -= h;
                let n = (f(&mlp, &up, &e_i) - f(&mlp, &um, &e_i)) / (2.0 * h);
                assert!(close(du[j], n), "trial {trial} d_eu[{j}]: {} vs {n}", du[j]);
                let (mut ip, mut im) = (e_i.clone(), e_i.clone());
                ip[j] += h;
                im[j] -= h;
                let n = (f(&mlp, &e_u, &ip) - f(&mlp, &e_u, &im)) / (2.0 * h);
                assert!(close(di[j], n), "trial {trial} d_ei[{j}]: {} vs {n}", di[j]);
            }
            let flat: Vec<Vec<f64>> = g.flat().iter().map(|s| s.to_vec()).collect();
            for (t, grads) in flat.iter().enumerate() {
                for k in 0..grads.len() {
                    let mut plus = mlp.clone();
                    plus.params_mut()[t][k] += h;
                    let mut minus = mlp.clone();
                    minus.params_mut()[t][k] -= h;
                    let n = (f(&plus, &e_u, &e_i) - f(&minus, &e_u, &e_i)) / (2.0 * h);
                    assert!(close(grads[k], n), "trial {trial} param {t}[{k}]: {} vs {n}", grads[k]);
                }
            }
            checked += 1;
        }
        assert!(checked >= 90);
    }

    fn min_abs_preactivation(s: &Scorer, e_u: &[f64], e_i: &[f64]) -> f64 {
        let Scorer::Mlp(m) = s else { return f64::INFINITY };
        let mut input: Vec<f64> = e_u.iter().chain(e_i).copied().collect();
        let mut min = f64::INFINITY;
        let mut out = Vec::new();
        for layer in &m.layers[..m.layers.len() - 1] {
            layer.forward(&input, &mut out);
            min = out.iter().fold(min, |m, x| m.min(x.abs()));
            input = out.iter().map(|x| x.max(0.0)).collect();
        }
        min
    }

    #[test]
    fn batch_scorer_matches_pointwise() {
        let mut rng = stream(8, Stream::Scorer);
        let d = 5;
        let items = Table::from_fn(7, d, |_, _| 2.0 * unit_f64(&mut rng) - 1.0);
        let e_u = random_vec(&mut rng, d);
        for scorer in [
            Scorer::Dot,
            Scorer::new(ScorerKind::Mlp, d, &default_hidden(d), &mut rng).unwrap(),
        ] {
            let bs = BatchScorer::new(&scorer, &items);
            let mut out = Vec::new();
            bs.score_all(&e_u, &items, &mut out);
            for i in 0..items.rows() {
                let y = scorer.score_only(&e_u, items.row(i));
                assert!((out[i] - y).abs() < 1e-12);
            }
        }
    }
}
