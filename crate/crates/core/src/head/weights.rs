use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::Matrix;
use crate::error::{Error, Result};
use crate::math;

/// Architecture of the scoring head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadShape {
    /// Width of the raw edge feature vector.
    pub input: usize,
    /// Token width after projection.
    pub hidden: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for HeadShape {
    fn default() -> Self {
        Self {
            input: 20,
            hidden: 256,
            heads: 4,
            mlp_hidden: 64,
        }
    }
}

impl HeadShape {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::arg("head dimensions must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::arg(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// A persisted tensor: name, shape and row-major `f32` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parameters of the projection, attention and MLP layers.
///
/// Attention projections are kept as full `hidden x hidden` matrices; head `h`
/// owns the column block `h*d..(h+1)*d`. Biases are `1 x n` matrices and the
/// off-diagonal penalty is a `1 x 1` matrix so every parameter can be visited
/// uniformly by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub shape: HeadShape,
    pub proj_w: Matrix,
    pub proj_b: Matrix,
    pub q_w: Matrix,
    pub q_b: Matrix,
    pub k_w: Matrix,
    pub k_b: Matrix,
    pub v_w: Matrix,
    pub v_b: Matrix,
    pub o_w: Matrix,
    pub o_b: Matrix,
    pub lambda: Matrix,
    pub fc1_w: Matrix,
    pub fc1_b: Matrix,
    pub fc2_w: Matrix,
    pub fc2_b: Matrix,
}

/// Names of the parameters in [`HeadWeights::params`] order.
pub const PARAM_NAMES: [&str; 15] = [
    "proj.weight",
    "proj.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "attn.lambda_comp",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

/// Deterministic initialization with [`HeadShape::default`] input and MLP widths.
pub fn init_weights(seed: u64, hidden: usize, heads: usize) -> Result<HeadWeights> {
    HeadWeights::init(
        HeadShape {
            hidden,
            heads,
            ..HeadShape::default()
        },
        seed,
    )
}

impl HeadWeights {
    /// All-zero weights of the given shape, with the penalty at 1.
    pub fn zeros(shape: HeadShape) -> Result<Self> {
        shape.validate()?;
        let HeadShape {
            input: i,
            hidden: d,
            mlp_hidden: m,
            ..
        } = shape;
        let mut lambda = Matrix::zeros(1, 1);
        lambda.data[0] = 1.0;
        Ok(Self {
            shape,
            proj_w: Matrix::zeros(i, d),
            proj_b: Matrix::zeros(1, d),
            q_w: Matrix::zeros(d, d),
            q_b: Matrix::zeros(1, d),
            k_w: Matrix::zeros(d, d),
            k_b: Matrix::zeros(1, d),
            v_w: Matrix::zeros(d, d),
            v_b: Matrix::zeros(1, d),
            o_w: Matrix::zeros(d, d),
            o_b: Matrix::zeros(1, d),
            lambda,
            fc1_w: Matrix::zeros(d, m),
            fc1_b: Matrix::zeros(1, m),
            fc2_w: Matrix::zeros(m, 1),
            fc2_b: Matrix::zeros(1, 1),
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization from a seeded ChaCha stream.
    /// Values are rounded to `f32` so a save/load cycle is exact.
    pub fn init(shape: HeadShape, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |m: &mut Matrix, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / math::sqrt(fan_in as f64);
            for v in &mut m.data {
                *v = rng.random_range(-bound..bound) as f32 as f64;
            }
        };
        let (i, d, mh) = (shape.input, shape.hidden, shape.mlp_hidden);
        fill(&mut w.proj_w, i, &mut rng);
        fill(&mut w.proj_b, i, &mut rng);
        for (m, b) in [
            (&mut w.q_w, &mut w.q_b),
            (&mut w.k_w, &mut w.k_b),
            (&mut w.v_w, &mut w.v_b),
            (&mut w.o_w, &mut w.o_b),
        ] {
            fill(m, d, &mut rng);
            fill(b, d, &mut rng);
        }
        fill(&mut w.fc1_w, d, &mut rng);
        fill(&mut w.fc1_b, d, &mut rng);
        fill(&mut w.fc2_w, mh, &mut rng);
        fill(&mut w.fc2_b, mh, &mut rng);
        Ok(w)
    }

    pub fn lambda_comp(&self) -> f64 {
        self.lambda.data[0]
    }

    pub fn set_lambda_comp(&mut self, v: f64) {
        self.lambda.data[0] = v;
    }

    pub fn params(&self) -> [&Matrix; 15] {
        [
            &self.proj_w,
            &self.proj_b,
            &self.q_w,
            &self.q_b,
            &self.k_w,
            &self.k_b,
            &self.v_w,
            &self.v_b,
            &self.o_w,
            &self.o_b,
            &self.lambda,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 15] {
        [
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.q_w,
            &mut self.q_b,
            &mut self.k_w,
            &mut self.k_b,
            &mut self.v_w,
            &mut self.v_b,
            &mut self.o_w,
            &mut self.o_b,
            &mut self.lambda,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|m| m.data.iter().all(|v| v.is_finite()))
    }

    /// Persisted form. Attention query/key/value projections are split per
    /// head into `attn.h{i}.{q,k,v}.{weight,bias}`.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let d = self.shape.hidden;
        let dh = self.shape.head_dim();
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            out.push(NamedTensor {
                name,
                shape,
                data: data.iter().map(|&v| v as f32).collect(),
            });
        };
        push("proj.weight".into(), alloc::vec![self.shape.input, d], &self.proj_w.data);
        push("proj.bias".into(), alloc::vec![d], &self.proj_b.data);
        for h in 0..self.shape.heads {
            for (tag, w, b) in [
                ("q", &self.q_w, &self.q_b),
                ("k", &self.k_w, &self.k_b),
                ("v", &self.v_w, &self.v_b),
            ] {
                let mut block = Vec::with_capacity(d * dh);
                for r in 0..d {
                    block.extend_from_slice(&w.row(r)[h * dh..(h + 1) * dh]);
                }
                push(format!("attn.h{h}.{tag}.weight"), alloc::vec![d, dh], &block);
                push(
                    format!("attn.h{h}.{tag}.bias"),
                    alloc::vec![dh],
                    &b.data[h * dh..(h + 1) * dh],
                );
            }
        }
        push("attn.out.weight".into(), alloc::vec![d, d], &self.o_w.data);
        push("attn.out.bias".into(), alloc::vec![d], &self.o_b.data);
        push("attn.lambda_comp".into(), alloc::vec![1], &self.lambda.data);
        let m = self.shape.mlp_hidden;
        push("mlp.fc1.weight".into(), alloc::vec![d, m], &self.fc1_w.data);
        push("mlp.fc1.bias".into(), alloc::vec![m], &self.fc1_b.data);
        push("mlp.fc2.weight".into(), alloc::vec![m, 1], &self.fc2_w.data);
        push("mlp.fc2.bias".into(), alloc::vec![1], &self.fc2_b.data);
        out
    }

    /// Rebuilds weights from persisted tensors, inferring the architecture
    /// from the shapes. Every expected tensor must be present exactly once;
    /// unknown names are rejected.
    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let mut by_name: BTreeMap<&str, &NamedTensor> = BTreeMap::new();
        for t in tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Schema(format!(
                    "tensor '{}' has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("tensor '{}' has non-finite values", t.name)));
            }
            if by_name.insert(t.name.as_str(), t).is_some() {
                return Err(Error::Schema(format!("duplicate tensor '{}'", t.name)));
            }
        }
        let get = |name: &str| -> Result<&NamedTensor> {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::Schema(format!("missing tensor '{name}'")))
        };

        let proj = get("proj.weight")?;
        if proj.shape.len() != 2 {
            return Err(shape_error(proj, "[input, hidden]"));
        }
        let (input, hidden) = (proj.shape[0], proj.shape[1]);
        let mut heads = 0;
        while by_name.contains_key(format!("attn.h{heads}.q.weight").as_str()) {
            heads += 1;
        }
        if heads == 0 {
            return Err(Error::Schema("missing tensor 'attn.h0.q.weight'".into()));
        }
        let fc1_b = get("mlp.fc1.bias")?;
        let shape = HeadShape {
            input,
            hidden,
            heads,
            mlp_hidden: fc1_b.data.len(),
        };
        shape
            .validate()
            .map_err(|e| Error::Schema(e.to_string()))?;
        let d = hidden;
        let dh = shape.head_dim();
        let m = shape.mlp_hidden;
        let mut w = Self::zeros(shape)?;

        let lambda = get("attn.lambda_comp")?;
        if !(lambda.shape.is_empty() || lambda.shape == [1]) {
            return Err(shape_error(lambda, "[1] or []"));
        }
        w.lambda.data[0] = lambda.data[0] as f64;
        let mut used: BTreeSet<String> = BTreeSet::new();
        used.insert("attn.lambda_comp".into());
        let mut take = |name: &str, dims: &[usize], dst: &mut Matrix| -> Result<()> {
            let t = get(name)?;
            if t.shape != dims {
                return Err(shape_error(t, &format!("{dims:?}")));
            }
            used.insert(name.into());
            for (o, v) in dst.data.iter_mut().zip(&t.data) {
                *o = *v as f64;
            }
            Ok(())
        };
        take("proj.weight", &[input, d], &mut w.proj_w)?;
        take("proj.bias", &[d], &mut w.proj_b)?;
        for h in 0..heads {
            for (tag, wm, bm) in [
                ("q", &mut w.q_w, &mut w.q_b),
                ("k", &mut w.k_w, &mut w.k_b),
                ("v", &mut w.v_w, &mut w.v_b),
            ] {
                let mut block = Matrix::zeros(d, dh);
                take(&format!("attn.h{h}.{tag}.weight"), &[d, dh], &mut block)?;
                for r in 0..d {
                    wm.data[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(block.row(r));
                }
                let mut bias = Matrix::zeros(1, dh);
                take(&format!("attn.h{h}.{tag}.bias"), &[dh], &mut bias)?;
                bm.data[h * dh..(h + 1) * dh].copy_from_slice(&bias.data);
            }
        }
        take("attn.out.weight", &[d, d], &mut w.o_w)?;
        take("attn.out.bias", &[d], &mut w.o_b)?;
        take("mlp.fc1.weight", &[d, m], &mut w.fc1_w)?;
        take("mlp.fc1.bias", &[m], &mut w.fc1_b)?;
        take("mlp.fc2.weight", &[m, 1], &mut w.fc2_w)?;
        take("mlp.fc2.bias", &[1], &mut w.fc2_b)?;

        if let Some(extra) = tensors.iter().find(|t| !used.contains(t.name.as_str())) {
            return Err(Error::Schema(format!("unexpected tensor '{}'", extra.name)));
        }
        Ok(w)
    }
}

fn shape_error(t: &NamedTensor, expected: &str) -> Error {
    Error::Schema(format!(
        "tensor '{}' has shape {:?}, expected {}",
        t.name, t.shape, expected
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HeadShape {
        HeadShape {
            input: 20,
            hidden: 8,
            heads: 2,
            mlp_hidden: 4,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_weights(7, 256, 4).unwrap();
        let b = init_weights(7, 256, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_weights(8, 256, 4).unwrap());
        assert_eq!(a.shape.head_dim(), 64);
        assert_eq!(a.lambda_comp(), 1.0);
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(matches!(init_weights(0, 10, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn named_round_trip() {
        let w = HeadWeights::init(small(), 3).unwrap();
        let t = w.to_named_tensors();
        assert_eq!(HeadWeights::from_named_tensors(&t).unwrap(), w);
    }

    #[test]
    fn missing_tensor_is_named() {
        let w = HeadWeights::init(small(), 3).unwrap();
        let t: Vec<_> = w
            .to_named_tensors()
            .into_iter()
            .filter(|t| t.name != "mlp.fc2.bias")
            .collect();
        let err = HeadWeights::from_named_tensors(&t).unwrap_err();
        assert!(err.to_string().contains("mlp.fc2.bias"), "{err}");
    }

    #[test]
    fn scalar_lambda_accepted() {
        let w = HeadWeights::init(small(), 3).unwrap();
        let mut t = w.to_named_tensors();
        for x in &mut t {
            if x.name == "attn.lambda_comp" {
                x.shape.clear();
            }
        }
        assert_eq!(HeadWeights::from_named_tensors(&t).unwrap(), w);
    }

    #[test]
    fn shape_mismatch_and_extras_rejected() {
        let w = HeadWeights::init(small(), 3).unwrap();
        let mut t = w.to_named_tensors();
        t[0].shape = alloc::vec![8, 20];
        assert!(matches!(HeadWeights::from_named_tensors(&t), Err(Error::Schema(_))));
        let mut t = w.to_named_tensors();
        t.push(NamedTensor {
            name: "extra".into(),
            shape: alloc::vec![1],
            data: alloc::vec![0.0],
        });
        let err = HeadWeights::from_named_tensors(&t).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }
}
