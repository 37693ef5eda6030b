//! Model persistence.
//!
//! Wire format, one object per layer tagged by `kind`:
//!
//! ```json
//! {
//!   "input_shape": {"kind":"channels","channels":2,"length":16},
//!   "layers": [
//!     {"kind":"conv1d","filters":[[[0.1,-0.2,0.3]]],"b":[0.0],"stride":1,
//!      "pool":{"kind":"max","r":2},"activation":"relu"},
//!     {"kind":"flatten"},
//!     {"kind":"dense","W":[[1.0,2.0]],"b":[0.5],"activation":"softmax"}
//!   ]
//! }
//! ```
//!
//! `filters[m][n]` is indexed input channel, then output channel. A conv `b`
//! is either one scalar per output channel or, for fused layers, one vector
//! per output channel. Fused layers additionally carry `fused_from`,
//! `predicted_mse`, and `ridge_used`. Numbers round-trip at full 64-bit
//! precision.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::layer::{Conv1dLayer, ConvBias, DenseLayer, Layer, Shape};
use super::network::{Network, PoolSpecSpec, ShapeSpec};
use super::ActivationKind;
use crate::error::{Error, Result};

/// Origin of a fused layer, attached to the layer object in the JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedProvenance {
    /// Indices of the two replaced layers in the pre-fusion network.
    pub fused_from: [usize; 2],
    pub predicted_mse: f64,
    pub ridge_used: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    input_shape: ShapeSpec,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerDoc {
    Dense {
        #[serde(rename = "W")]
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
        activation: ActivationKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fused_from: Option<[usize; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        predicted_mse: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ridge_used: Option<f64>,
    },
    Conv1d {
        filters: Vec<Vec<Vec<f64>>>,
        b: ConvBiasDoc,
        stride: usize,
        pool: PoolSpecSpec,
        activation: ActivationKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fused_from: Option<[usize; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        predicted_mse: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ridge_used: Option<f64>,
    },
    Flatten,
}

fn provenance_fields(
    p: &Option<FusedProvenance>,
) -> (Option<[usize; 2]>, Option<f64>, Option<f64>) {
    match p {
        Some(p) => (Some(p.fused_from), Some(p.predicted_mse), Some(p.ridge_used)),
        None => (None, None, None),
    }
}

fn provenance_from_fields(
    fused_from: Option<[usize; 2]>,
    predicted_mse: Option<f64>,
    ridge_used: Option<f64>,
) -> Option<FusedProvenance> {
    fused_from.map(|fused_from| FusedProvenance {
        fused_from,
        predicted_mse: predicted_mse.unwrap_or(f64::NAN),
        ridge_used: ridge_used.unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum ConvBiasDoc {
    PerChannel(Vec<f64>),
    PerPosition(Vec<Vec<f64>>),
}

/// A network plus per-layer fusion provenance (None for unfused layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub network: Network,
    pub provenance: Vec<Option<FusedProvenance>>,
}

impl Model {
    pub fn unfused(network: Network) -> Self {
        let provenance = vec![None; network.layers.len()];
        Model { network, provenance }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            input_shape: ShapeSpec::from(self.network.input_shape),
            layers: self
                .network
                .layers
                .iter()
                .zip(&self.provenance)
                .map(|(layer, prov)| layer_to_doc(layer, prov.clone()))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        let mut layers = Vec::with_capacity(doc.layers.len());
        let mut provenance = Vec::with_capacity(doc.layers.len());
        for layer_doc in doc.layers {
            let (layer, prov) = layer_from_doc(layer_doc)?;
            layers.push(layer);
            provenance.push(prov);
        }
        let network = Network::new(layers, Shape::from(doc.input_shape))?;
        Ok(Model { network, provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path)?;
        Model::from_json(&text)
    }
}

fn layer_to_doc(layer: &Layer, provenance: Option<FusedProvenance>) -> LayerDoc {
    let (fused_from, predicted_mse, ridge_used) = provenance_fields(&provenance);
    match layer {
        Layer::Dense(d) => LayerDoc::Dense {
            w: (0..d.weights.nrows())
                .map(|r| d.weights.row(r).iter().cloned().collect())
                .collect(),
            b: d.bias.iter().cloned().collect(),
            activation: d.activation,
            fused_from,
            predicted_mse,
            ridge_used,
        },
        Layer::Conv1d(c) => LayerDoc::Conv1d {
            filters: c
                .filters
                .iter()
                .map(|per_in| per_in.iter().map(|h| h.iter().cloned().collect()).collect())
                .collect(),
            b: match &c.bias {
                ConvBias::PerChannel(b) => ConvBiasDoc::PerChannel(b.iter().cloned().collect()),
                ConvBias::PerPosition(b) => {
                    ConvBiasDoc::PerPosition(b.iter().map(|v| v.iter().cloned().collect()).collect())
                }
            },
            stride: c.stride,
            pool: PoolSpecSpec::from_pool(c.pool),
            activation: c.activation,
            fused_from,
            predicted_mse,
            ridge_used,
        },
        Layer::Flatten => LayerDoc::Flatten,
    }
}

fn layer_from_doc(doc: LayerDoc) -> Result<(Layer, Option<FusedProvenance>)> {
    match doc {
        LayerDoc::Dense { w, b, activation, fused_from, predicted_mse, ridge_used } => {
            let rows = w.len();
            if rows == 0 {
                return Err(Error::Data("dense layer W must be non-empty".into()));
            }
            let cols = w[0].len();
            if w.iter().any(|row| row.len() != cols) {
                return Err(Error::Data("dense layer W must be rectangular".into()));
            }
            let weights = DMatrix::from_fn(rows, cols, |r, c| w[r][c]);
            let layer = DenseLayer::new(weights, DVector::from_vec(b), activation)?;
            Ok((Layer::Dense(layer), provenance_from_fields(fused_from, predicted_mse, ridge_used)))
        }
        LayerDoc::Conv1d { filters, b, stride, pool, activation, fused_from, predicted_mse, ridge_used } => {
            let filters: Vec<Vec<DVector<f64>>> = filters
                .into_iter()
                .map(|per_in| per_in.into_iter().map(DVector::from_vec).collect())
                .collect();
            let bias = match b {
                ConvBiasDoc::PerChannel(v) => ConvBias::PerChannel(DVector::from_vec(v)),
                ConvBiasDoc::PerPosition(v) => {
                    ConvBias::PerPosition(v.into_iter().map(DVector::from_vec).collect())
                }
            };
            let layer = Conv1dLayer::new(filters, bias, stride, activation, pool.to_pool()?)?;
            Ok((Layer::Conv1d(layer), provenance_from_fields(fused_from, predicted_mse, ridge_used)))
        }
        LayerDoc::Flatten => Ok((Layer::Flatten, None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, NetworkSpec, PoolSpecSpec, ShapeSpec};
    use proptest::prelude::*;

    fn sample_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: ShapeSpec::Channels { channels: 2, length: 9 },
            layers: vec![
                LayerSpec::Conv1d {
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                    pool: PoolSpecSpec::Max { r: 2 },
                    activation: ActivationKind::Relu,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 4, activation: ActivationKind::Softmax },
            ],
        }
    }

    #[test]
    fn json_schema_field_names() {
        let model = Model::unfused(sample_spec().random_init(1).unwrap());
        let text = model.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["layers"][0]["kind"], "conv1d");
        assert_eq!(v["layers"][0]["pool"]["kind"], "max");
        assert_eq!(v["layers"][0]["pool"]["r"], 2);
        assert_eq!(v["layers"][1]["kind"], "flatten");
        assert_eq!(v["layers"][2]["kind"], "dense");
        assert!(v["layers"][2]["W"].is_array());
        assert_eq!(v["layers"][2]["activation"], "softmax");
        assert_eq!(v["input_shape"]["kind"], "channels");
        // Unfused layers carry no provenance keys.
        assert!(v["layers"][0].get("fused_from").is_none());
    }

    proptest! {
        /// Bit-exact round trip for arbitrary seeds (covers f64 precision).
        #[test]
        fn round_trip_is_bit_exact(seed in 0u64..64) {
            let model = Model::unfused(sample_spec().random_init(seed).unwrap());
            let back = Model::from_json(&model.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, model);
        }
    }

    #[test]
    fn per_position_bias_round_trips_with_provenance() {
        use nalgebra::DVector;
        let conv = Conv1dLayer::new(
            vec![vec![DVector::from_vec(vec![0.25, -0.5])]],
            ConvBias::PerPosition(vec![DVector::from_vec(vec![0.1, 0.2, 0.3])]),
            1,
            ActivationKind::Tanh,
            crate::nn::PoolSpec::none(),
        )
        .unwrap();
        let net = Network::new(vec![Layer::Conv1d(conv)], Shape::Channels { channels: 1, length: 3 }).unwrap();
        let model = Model {
            network: net,
            provenance: vec![Some(FusedProvenance { fused_from: [0, 1], predicted_mse: 0.125, ridge_used: 0.0 })],
        };
        let text = model.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["layers"][0]["fused_from"][0], 0);
        assert_eq!(v["layers"][0]["b"][0][2], 0.3);
        let back = Model::from_json(&text).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn malformed_layer_is_rejected() {
        let bad = r#"{"input_shape":{"kind":"flat","length":2},
                      "layers":[{"kind":"dense","W":[[1.0],[2.0,3.0]],"b":[0.0,0.0],"activation":"relu"}]}"#;
        assert!(Model::from_json(bad).is_err());
    }
}
