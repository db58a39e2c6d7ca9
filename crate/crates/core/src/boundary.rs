//! A posteriori parametrization of a trained network: selected biases or
//! weights receive additive shifts, and the shifts become the problem
//! parameters.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{PlaneGeometry, ScalarField};
use crate::neuralnet::DenseNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Bias,
    Weight,
}

/// One perturbable network entry. Weight indices are row-major within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, ParamKind, usize)", into = "(usize, ParamKind, usize)")]
pub struct ParamRef {
    pub layer: usize,
    pub kind: ParamKind,
    pub index: usize,
}

impl From<(usize, ParamKind, usize)> for ParamRef {
    fn from((layer, kind, index): (usize, ParamKind, usize)) -> Self {
        Self { layer, kind, index }
    }
}

impl From<ParamRef> for (usize, ParamKind, usize) {
    fn from(r: ParamRef) -> Self {
        (r.layer, r.kind, r.index)
    }
}

/// Ordered list of perturbed entries; the order defines parameter coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerturbationScheme {
    pub targets: Vec<ParamRef>,
}

impl PerturbationScheme {
    pub fn new(targets: Vec<ParamRef>) -> Self {
        Self { targets }
    }

    /// Every bias of the last `n_layers` layers, earlier layers first.
    pub fn trailing_biases(net: &DenseNetwork, n_layers: usize) -> Result<Self> {
        let total = net.layers().len();
        if n_layers == 0 || n_layers > total {
            return Err(Error::InvalidArgument(format!(
                "cannot take the last {n_layers} of {total} layers"
            )));
        }
        let mut targets = Vec::new();
        for layer in total - n_layers..total {
            for index in 0..net.layers()[layer].bias.len() {
                targets.push(ParamRef {
                    layer,
                    kind: ParamKind::Bias,
                    index,
                });
            }
        }
        Ok(Self { targets })
    }

    /// Weight matrix then bias of the layer producing the last hidden state.
    pub fn last_hidden_layer(net: &DenseNetwork) -> Result<Self> {
        let total = net.layers().len();
        if total < 2 {
            return Err(Error::InvalidArgument("network has no hidden layer".into()));
        }
        let layer = total - 2;
        let l = &net.layers()[layer];
        let mut targets: Vec<ParamRef> = (0..l.weights.len())
            .map(|index| ParamRef {
                layer,
                kind: ParamKind::Weight,
                index,
            })
            .collect();
        targets.extend((0..l.bias.len()).map(|index| ParamRef {
            layer,
            kind: ParamKind::Bias,
            index,
        }));
        Ok(Self { targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn validate(&self, net: &DenseNetwork) -> Result<()> {
        for (k, t) in self.targets.iter().enumerate() {
            let layer = net.layers().get(t.layer).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "perturbation {k}: layer {} out of range ({} layers)",
                    t.layer,
                    net.layers().len()
                ))
            })?;
            let size = match t.kind {
                ParamKind::Bias => layer.bias.len(),
                ParamKind::Weight => layer.weights.len(),
            };
            if t.index >= size {
                return Err(Error::InvalidArgument(format!(
                    "perturbation {k}: {:?} index {} out of range ({size} entries)",
                    t.kind, t.index
                )));
            }
        }
        Ok(())
    }

    /// A copy of `net` with every target shifted by the matching coordinate of `mu`.
    pub fn apply(&self, net: &DenseNetwork, mu: &[f64]) -> Result<DenseNetwork> {
        if mu.len() != self.len() {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: self.len(),
                actual: mu.len(),
            });
        }
        self.validate(net)?;
        let mut out = net.clone();
        for (t, &shift) in self.targets.iter().zip(mu) {
            let layer = &mut out.layers_mut()[t.layer];
            match t.kind {
                ParamKind::Bias => layer.bias[t.index] += shift,
                ParamKind::Weight => {
                    let cols = layer.weights.ncols();
                    layer.weights[(t.index / cols, t.index % cols)] += shift;
                }
            }
        }
        Ok(out)
    }
}

/// Parameter values with per-coordinate closed bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    bounds: Vec<(f64, f64)>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if values.len() != bounds.len() {
            return Err(Error::Dimension {
                context: "parameter bounds",
                expected: values.len(),
                actual: bounds.len(),
            });
        }
        for (i, (&v, &(lo, hi))) in values.iter().zip(&bounds).enumerate() {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("coordinate {i}: empty interval [{lo}, {hi}]")));
            }
            if !(lo..=hi).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "coordinate {i}: {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { values, bounds })
    }

    /// Unbounded vector (bounds are +/- infinity).
    pub fn unbounded(values: Vec<f64>) -> Self {
        let bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); values.len()];
        Self { values, bounds }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn parametrized_forward(
    net: &DenseNetwork,
    scheme: &PerturbationScheme,
    mu: &ParamVector,
    x: &[f64],
) -> Result<Vec<f64>> {
    scheme.apply(net, mu.values())?.forward(x)
}

/// `m` i.i.d. uniform draws from `[lo, hi]^p`.
pub fn sample_param_vectors(
    p: usize,
    m: usize,
    bounds: (f64, f64),
    seed: u64,
) -> Result<Vec<ParamVector>> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one parameter sample".into()));
    }
    let (lo, hi) = bounds;
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid bounds [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let values = (0..p).map(|_| rng.random_range(lo..=hi)).collect();
            ParamVector::new(values, vec![bounds; p])
        })
        .collect()
}

/// Evaluates a two-input `(r, theta)` network at every geometry point.
pub fn network_field(net: &DenseNetwork, geometry: &Arc<PlaneGeometry>) -> Result<ScalarField> {
    if net.input_dim() != 2 || net.output_dim() != 1 {
        return Err(Error::Dimension {
            context: "boundary network must map (r, theta) to a scalar; input",
            expected: 2,
            actual: net.input_dim(),
        });
    }
    let pts = geometry.polar();
    let x = DMatrix::from_fn(2, pts.len(), |i, k| if i == 0 { pts[k].0 } else { pts[k].1 });
    let y = net.forward_batch(&x)?;
    ScalarField::new(geometry.clone(), y.as_slice().to_vec())
}

/// The inlet distribution produced by the perturbed network at every geometry point.
pub fn inlet_from_params(
    net: &DenseNetwork,
    scheme: &PerturbationScheme,
    mu: &ParamVector,
    geometry: &Arc<PlaneGeometry>,
) -> Result<ScalarField> {
    network_field(&scheme.apply(net, mu.values())?, geometry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{Activation, Layer};

    fn case1_net() -> DenseNetwork {
        DenseNetwork::mlp(2, &[10, 5, 3], 1, Activation::Softplus, Activation::Identity, 11).unwrap()
    }

    #[test]
    fn zero_shift_is_exact() {
        let net = case1_net();
        let scheme = PerturbationScheme::trailing_biases(&net, 2).unwrap();
        let mu = ParamVector::unbounded(vec![0.0; 4]);
        for x in [[0.0, 0.0], [0.3, 1.0], [1.1, 6.0]] {
            assert_eq!(parametrized_forward(&net, &scheme, &mu, &x).unwrap(), net.forward(&x).unwrap());
        }
    }

    #[test]
    fn bias_shift_is_additive() {
        let net = DenseNetwork::from_layers(vec![Layer::from_rows(
            1,
            2,
            &[0.5, -0.25],
            &[1.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let scheme = PerturbationScheme::trailing_biases(&net, 1).unwrap();
        let mu = ParamVector::unbounded(vec![0.75]);
        let x = [2.0, 4.0];
        let y = parametrized_forward(&net, &scheme, &mu, &x).unwrap()[0];
        assert_eq!(y, net.forward(&x).unwrap()[0] + 0.75);
    }

    #[test]
    fn base_network_untouched() {
        let net = case1_net();
        let before = net.clone();
        let scheme = PerturbationScheme::trailing_biases(&net, 2).unwrap();
        let perturbed = scheme.apply(&net, &[0.1, -0.2, 0.3, 0.4]).unwrap();
        assert_eq!(net, before);
        // only the targeted biases moved
        let (a, b) = (net.parameters(), perturbed.parameters());
        let changed = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert_eq!(changed, 4);
    }

    #[test]
    fn scheme_shapes() {
        let net = case1_net();
        assert_eq!(PerturbationScheme::trailing_biases(&net, 2).unwrap().len(), 4);
        let case2 =
            DenseNetwork::mlp(2, &[8, 2, 2], 1, Activation::Softplus, Activation::Identity, 1).unwrap();
        let s = PerturbationScheme::last_hidden_layer(&case2).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.targets.iter().all(|t| t.layer == 2));
    }

    #[test]
    fn out_of_range_reference_rejected() {
        let net = case1_net();
        let bad = PerturbationScheme::new(vec![ParamRef {
            layer: 9,
            kind: ParamKind::Bias,
            index: 0,
        }]);
        assert!(bad.apply(&net, &[0.0]).is_err());
        let bad = PerturbationScheme::new(vec![ParamRef {
            layer: 3,
            kind: ParamKind::Weight,
            index: 3,
        }]);
        assert!(bad.apply(&net, &[0.0]).is_err());
        let ok = PerturbationScheme::trailing_biases(&net, 1).unwrap();
        assert!(matches!(ok.apply(&net, &[0.0, 1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn weight_index_is_row_major() {
        let net = DenseNetwork::from_layers(vec![Layer::from_rows(
            2,
            2,
            &[0.0; 4],
            &[0.0; 2],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let s = PerturbationScheme::new(vec![ParamRef {
            layer: 0,
            kind: ParamKind::Weight,
            index: 1,
        }]);
        let p = s.apply(&net, &[2.0]).unwrap();
        assert_eq!(p.layers()[0].weights[(0, 1)], 2.0);
    }

    #[test]
    fn sampling_contract() {
        let zero = sample_param_vectors(3, 1, (0.0, 0.0), 1).unwrap();
        assert_eq!(zero[0].values(), &[0.0, 0.0, 0.0]);
        let s = sample_param_vectors(4, 100, (-0.5, 0.5), 42).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.iter().flat_map(|v| v.values()).all(|v| (-0.5..=0.5).contains(v)));
        assert_eq!(s, sample_param_vectors(4, 100, (-0.5, 0.5), 42).unwrap());
        assert_ne!(s, sample_param_vectors(4, 100, (-0.5, 0.5), 43).unwrap());
        assert!(sample_param_vectors(4, 0, (-0.5, 0.5), 42).is_err());
    }

    #[test]
    fn inlet_fields() {
        let g = Arc::new(PlaneGeometry::polar_disc(1.0, 4, 6).unwrap());
        let net = case1_net();
        let scheme = PerturbationScheme::trailing_biases(&net, 2).unwrap();
        let zero = ParamVector::unbounded(vec![0.0; 4]);
        let inlet = inlet_from_params(&net, &scheme, &zero, &g).unwrap();
        assert_eq!(inlet, network_field(&net, &g).unwrap());

        let constant = DenseNetwork::from_layers(vec![Layer::from_rows(
            1,
            2,
            &[0.0, 0.0],
            &[-3.5],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let s = PerturbationScheme::new(vec![]);
        let f = inlet_from_params(&constant, &s, &ParamVector::unbounded(vec![]), &g).unwrap();
        assert!(f.values().iter().all(|&v| v == -3.5));

        let mu = ParamVector::unbounded(vec![0.3, -0.2, 0.4, 0.1]);
        let moved = inlet_from_params(&net, &scheme, &mu, &g).unwrap();
        assert!(moved.values().iter().all(|v| v.is_finite()));
        assert_ne!(moved, inlet);
    }

    #[test]
    fn scheme_json_is_triples() {
        let s = PerturbationScheme::new(vec![ParamRef {
            layer: 2,
            kind: ParamKind::Weight,
            index: 3,
        }]);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"[[2,"weight",3]]"#);
        assert_eq!(serde_json::from_str::<PerturbationScheme>(&j).unwrap(), s);
    }
}
