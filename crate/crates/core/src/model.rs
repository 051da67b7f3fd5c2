//! Small MLP classifiers with an interchangeable final head: a plain linear
//! layer or a temperature-scaled cosine-similarity head over class
//! prototypes. Forward passes are recorded on a [`Tape`](crate::tape::Tape)
//! so every head is differentiable end to end.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, Rng};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, EPS_NORM};

/// One named model parameter. The owning map key is the unique name.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub tensor: Tensor,
    pub trainable: bool,
}

pub type ParamMap = BTreeMap<String, Parameter>;

/// Layer widths from input through hidden layers to the feature dimension;
/// every layer is followed by relu.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MLPSpec {
    pub layer_widths: Vec<usize>,
}

impl MLPSpec {
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        let spec = MLPSpec { layer_widths };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::invalid_config(
                "layer_widths",
                "need at least an input and a feature layer",
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid_config("layer_widths", "all widths must be ≥ 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Cosine,
    Linear,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(HeadKind::Cosine),
            "linear" => Ok(HeadKind::Linear),
            other => Err(Error::invalid_config(
                "head",
                format!("unknown head '{other}' (expected cosine|linear)"),
            )),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Cosine => "cosine",
            HeadKind::Linear => "linear",
        }
    }
}

/// Temperature-scaled cosine head: logit_k = τ · cos(f, w_k). No bias.
#[derive(Clone, Debug)]
pub struct CosineClassifier {
    pub prototypes: Tensor,
    pub temperature: f64,
}

impl CosineClassifier {
    pub fn new(prototypes: Tensor, temperature: f64) -> Result<Self> {
        if prototypes.shape().len() != 2 || prototypes.shape()[0] < 2 {
            return Err(Error::invalid_config(
                "prototypes",
                "need a [K, D] matrix with K ≥ 2",
            ));
        }
        if temperature <= 0.0 {
            return Err(Error::invalid_config("temperature", "must be positive"));
        }
        let (k, d) = (prototypes.shape()[0], prototypes.shape()[1]);
        for row in 0..k {
            let norm = row_norm(prototypes.data(), row, d);
            if norm <= EPS_NORM {
                return Err(Error::DegenerateVector { norm, min: EPS_NORM });
            }
        }
        Ok(CosineClassifier { prototypes, temperature })
    }

    pub fn logits(&self, f: &Tensor) -> Result<Tensor> {
        let d = self.prototypes.shape()[1];
        if f.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "cosine_logits",
                detail: format!("feature {:?} vs prototype dim {}", f.shape(), d),
            });
        }
        let fnorm = f.l2_norm();
        if fnorm <= EPS_NORM {
            return Err(Error::DegenerateVector { norm: fnorm, min: EPS_NORM });
        }
        let k = self.prototypes.shape()[0];
        let mut out = Vec::with_capacity(k);
        for row in 0..k {
            let w = &self.prototypes.data()[row * d..(row + 1) * d];
            let dot: f64 = w.iter().zip(f.data()).map(|(&a, &b)| a * b).sum();
            let wnorm = row_norm(self.prototypes.data(), row, d);
            out.push(self.temperature * dot / (fnorm * wnorm));
        }
        Ok(Tensor::from_vec(out))
    }
}

/// Plain affine head: logits = W·f + b.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear_classifier",
                detail: format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            });
        }
        Ok(LinearClassifier { weight, bias })
    }

    pub fn logits(&self, f: &Tensor) -> Result<Tensor> {
        let (k, d) = (self.weight.shape()[0], self.weight.shape()[1]);
        if f.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "linear_logits",
                detail: format!("feature {:?} vs weight dim {}", f.shape(), d),
            });
        }
        let mut out = Vec::with_capacity(k);
        for row in 0..k {
            let w = &self.weight.data()[row * d..(row + 1) * d];
            let dot: f64 = w.iter().zip(f.data()).map(|(&a, &b)| a * b).sum();
            out.push(dot + self.bias.data()[row]);
        }
        Ok(Tensor::from_vec(out))
    }
}

/// MLP backbone plus classification head, all parameters in one named map.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: MLPSpec,
    pub head: HeadKind,
    pub temperature: f64,
    pub num_classes: usize,
    pub params: ParamMap,
}

/// Node ids of this model's parameters on one particular tape. Binding
/// registers each parameter exactly once, so several forward passes on the
/// same tape (clean + mixup) share parameter nodes and gradients accumulate.
pub struct TapeBinding {
    ids: BTreeMap<String, NodeId>,
}

impl TapeBinding {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }
}

impl Model {
    pub fn new(
        spec: MLPSpec,
        head: HeadKind,
        num_classes: usize,
        temperature: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if num_classes < 2 {
            return Err(Error::invalid_config("num_classes", "need K ≥ 2"));
        }
        if temperature <= 0.0 {
            return Err(Error::invalid_config("tau", "temperature must be positive"));
        }
        let mut params = ParamMap::new();
        let widths = &spec.layer_widths;
        for i in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            // He initialization; small positive biases keep early relu
            // features away from the all-zero degenerate point.
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_out * fan_in).map(|_| std * normal(rng)).collect();
            params.insert(
                format!("layer{i}.weight"),
                Parameter {
                    tensor: Tensor::new(vec![fan_out, fan_in], w)?,
                    trainable: true,
                },
            );
            params.insert(
                format!("layer{i}.bias"),
                Parameter {
                    tensor: Tensor::from_vec(vec![0.01; fan_out]),
                    trainable: true,
                },
            );
        }
        let d = spec.feature_dim();
        match head {
            HeadKind::Cosine => {
                // unit-normalized random prototype rows
                let mut w = vec![0.0; num_classes * d];
                for row in 0..num_classes {
                    loop {
                        for v in &mut w[row * d..(row + 1) * d] {
                            *v = normal(rng);
                        }
                        let norm = row_norm(&w, row, d);
                        if norm > EPS_NORM {
                            for v in &mut w[row * d..(row + 1) * d] {
                                *v /= norm;
                            }
                            break;
                        }
                    }
                }
                params.insert(
                    "head.weight".to_string(),
                    Parameter {
                        tensor: Tensor::new(vec![num_classes, d], w)?,
                        trainable: true,
                    },
                );
            }
            HeadKind::Linear => {
                let std = 1.0 / (d as f64).sqrt();
                let w: Vec<f64> = (0..num_classes * d).map(|_| std * normal(rng)).collect();
                params.insert(
                    "head.weight".to_string(),
                    Parameter {
                        tensor: Tensor::new(vec![num_classes, d], w)?,
                        trainable: true,
                    },
                );
                params.insert(
                    "head.bias".to_string(),
                    Parameter {
                        tensor: Tensor::from_vec(vec![0.0; num_classes]),
                        trainable: true,
                    },
                );
            }
        }
        Ok(Model {
            spec,
            head,
            temperature,
            num_classes,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    fn n_layers(&self) -> usize {
        self.spec.layer_widths.len() - 1
    }

    /// Register every parameter on `tape` once.
    pub fn bind(&self, tape: &mut Tape) -> TapeBinding {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.params {
            ids.insert(name.clone(), tape.param(name, p.tensor.clone()));
        }
        TapeBinding { ids }
    }

    /// Backbone features for a `[B, D_in]` batch node; relu after every layer.
    pub fn features_on(&self, tape: &mut Tape, bind: &TapeBinding, x: NodeId) -> Result<NodeId> {
        if tape.value(x).shape().len() != 2 || tape.value(x).shape()[1] != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward_features",
                detail: format!(
                    "input {:?} vs expected [B, {}]",
                    tape.value(x).shape(),
                    self.input_dim()
                ),
            });
        }
        let mut h = x;
        for i in 0..self.n_layers() {
            let z = tape.matmul_nt(h, bind.id(&format!("layer{i}.weight")))?;
            let z = tape.add_row_broadcast(z, bind.id(&format!("layer{i}.bias")))?;
            h = tape.relu(z)?;
        }
        Ok(h)
    }

    /// Head logits for a `[B, D]` feature node.
    pub fn logits_from_features_on(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        features: NodeId,
    ) -> Result<NodeId> {
        match self.head {
            HeadKind::Cosine => {
                let f = tape.l2_normalize(features)?;
                let w = tape.l2_normalize(bind.id("head.weight"))?;
                let sims = tape.matmul_nt(f, w)?;
                tape.scale(sims, self.temperature)
            }
            HeadKind::Linear => {
                let z = tape.matmul_nt(features, bind.id("head.weight"))?;
                tape.add_row_broadcast(z, bind.id("head.bias"))
            }
        }
    }

    /// Convenience: features then logits.
    pub fn logits_on(&self, tape: &mut Tape, bind: &TapeBinding, x: NodeId) -> Result<NodeId> {
        let f = self.features_on(tape, bind, x)?;
        self.logits_from_features_on(tape, bind, f)
    }

    /// Batched no-grad logits via a scratch tape (single forward code path).
    pub fn logits_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let xn = tape.constant(x.clone());
        let logits = self.logits_on(&mut tape, &bind, xn)?;
        Ok(tape.value(logits).clone())
    }

    /// Current parameter values (names → tensors).
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.tensor.clone()))
            .collect()
    }

    /// Install values for every named parameter; names/shapes must match.
    pub fn set_tensors(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in &mut self.params {
            let v = values.get(name).ok_or_else(|| Error::ShapeMismatch {
                op: "set_tensors",
                detail: format!("missing parameter '{name}'"),
            })?;
            if v.shape() != p.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_tensors",
                    detail: format!(
                        "'{name}': {:?} vs {:?}",
                        v.shape(),
                        p.tensor.shape()
                    ),
                });
            }
            p.tensor = v.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            widths: self.spec.layer_widths.clone(),
            head: self.head.as_str().to_string(),
            num_classes: self.num_classes,
            temperature_bits: self.temperature.to_bits(),
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        CheckpointParam {
                            shape: p.tensor.shape().to_vec(),
                            bits: p.tensor.data().iter().map(|v| v.to_bits()).collect(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let perr = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            reason,
        };
        if file.format != CHECKPOINT_FORMAT {
            return Err(perr(format!("unexpected format marker '{}'", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(perr(format!("unsupported checkpoint version {}", file.version)));
        }
        let mut params = ParamMap::new();
        for (name, p) in file.params {
            let expect: usize = p.shape.iter().product();
            if expect != p.bits.len() {
                return Err(perr(format!(
                    "parameter '{name}': shape {:?} vs {} values",
                    p.shape,
                    p.bits.len()
                )));
            }
            let data = p.bits.into_iter().map(f64::from_bits).collect();
            params.insert(
                name,
                Parameter {
                    tensor: Tensor::new(p.shape, data)?,
                    trainable: p.trainable,
                },
            );
        }
        let model = Model {
            spec: MLPSpec::new(file.widths)?,
            head: HeadKind::parse(&file.head)?,
            temperature: f64::from_bits(file.temperature_bits),
            num_classes: file.num_classes,
            params,
        };
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "fplab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: every float is stored as its IEEE-754 bit pattern
/// (u64), so save → load round-trips bitwise.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    widths: Vec<usize>,
    head: String,
    num_classes: usize,
    temperature_bits: u64,
    params: BTreeMap<String, CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    shape: Vec<usize>,
    bits: Vec<u64>,
    trainable: bool,
}

fn row_norm(data: &[f64], row: usize, width: usize) -> f64 {
    data[row * width..(row + 1) * width]
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
