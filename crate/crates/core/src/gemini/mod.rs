//! The class-guided master network.
//!
//! One stream per class maps inputs to an intermediate space; a shared
//! head `g` maps stream outputs to the final embedding. A triplet drawn
//! for the ordered pair `(k, l)` passes its anchor and positive through
//! stream `k` and its negative through stream `l`, so only those two
//! streams and the head take part in a step.
//!
//! Per triplet, with `d` the Euclidean distance:
//!
//! ```text
//! intra = beta * d(f_k(x), f_k(x+))
//! M     = d(g(f_k(x)), g(f_k(x+))) + m
//! inter = (1 - beta) * max(0, M - d(g(f_k(x)), g(f_l(x-))))
//! total = intra + inter
//! ```
//!
//! The constrained form replaces `g(f_l(x-))` with a fixed vector in the
//! embedding space.

mod train;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledSample};
use crate::embedding::{EmbeddingSet, EmbeddingSource};
use crate::error::{Error, Result};
use crate::numerics::{Mlp, Tape, Tensor, Var};
use crate::persist;

pub use train::{check_stream_condition, train_from, train_gemini, ClassConstraint, GeminiConfig, GeminiRun, StreamCondition};

/// 1 when the two classes match, else 0.
pub fn indicator(i: usize, j: usize) -> u8 {
    u8::from(i == j)
}

/// Scalar loss components for one triplet, or their batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub intra: f64,
    pub margin_m: f64,
    pub inter: f64,
    pub total: f64,
}

/// Tape handles for a batch loss; `loss` is the scalar to differentiate.
pub struct BatchLoss {
    pub loss: Var,
    pub terms: LossTerms,
}

/// What the anchors are pushed away from: negative samples run through
/// stream `class`, fixed embedding-space vectors, or both.
#[derive(Default)]
pub struct Repel<'x> {
    pub negatives: Option<(usize, Var)>,
    pub vectors: &'x [Vec<f64>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeminiModel {
    pub streams: Vec<Mlp>,
    pub head: Mlp,
    pub beta: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GeminiHeader {
    kind: String,
    classes: usize,
    stream_dims: Vec<usize>,
    stream_relu_output: bool,
    head_dims: Vec<usize>,
    beta: f64,
    margin: f64,
    seed: u64,
}

impl GeminiModel {
    /// `stream_dims` and `head_dims` list layer widths after the input,
    /// e.g. `[128, 64]` and `[2]`. Stream outputs are rectified.
    pub fn new<R: Rng>(
        rng: &mut R,
        input_dim: usize,
        classes: usize,
        stream_dims: &[usize],
        head_dims: &[usize],
        beta: f64,
        margin: f64,
    ) -> Result<Self> {
        if stream_dims.is_empty() || head_dims.is_empty() || stream_dims.contains(&0) || head_dims.contains(&0) {
            return Err(Error::Config("stream and head need at least one non-empty layer".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(stream_dims);
        let streams = (0..classes).map(|_| Mlp::new(rng, &dims, true)).collect();
        let mut hdims = vec![*stream_dims.last().unwrap()];
        hdims.extend_from_slice(head_dims);
        let head = Mlp::new(rng, &hdims, false);
        GeminiModel::from_parts(streams, head, beta, margin)
    }

    pub fn from_parts(streams: Vec<Mlp>, head: Mlp, beta: f64, margin: f64) -> Result<Self> {
        if streams.len() < 2 {
            return Err(Error::TooFewClasses(streams.len()));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
        }
        if !(margin.is_finite() && margin >= 0.0) {
            return Err(Error::Config(format!("margin must be finite and non-negative, got {margin}")));
        }
        let dims = streams[0].dims();
        if streams.iter().any(|s| s.dims() != dims || s.relu_output != streams[0].relu_output) {
            return Err(Error::Config("all streams must share one architecture".into()));
        }
        if head.input_dim() != *dims.last().unwrap() {
            return Err(Error::ShapeMismatch {
                op: "gemini head",
                lhs: dims,
                rhs: head.dims(),
            });
        }
        Ok(GeminiModel {
            streams,
            head,
            beta,
            margin,
        })
    }

    pub fn class_count(&self) -> usize {
        self.streams.len()
    }

    pub fn input_dim(&self) -> usize {
        self.streams[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    /// Stream parameters in class order, then head parameters.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.streams.iter().flat_map(Mlp::parameters).collect();
        p.extend(self.head.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.streams.iter_mut().flat_map(Mlp::parameters_mut).collect();
        p.extend(self.head.parameters_mut());
        p
    }

    /// Parameters touched by a batch for pair `(k, l)`: both streams and the head.
    pub fn active_parameters_mut(&mut self, k: usize, l: usize) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for (c, s) in self.streams.iter_mut().enumerate() {
            if c == k || c == l {
                p.extend(s.parameters_mut());
            }
        }
        p.extend(self.head.parameters_mut());
        p
    }

    /// Index range of stream `k` within [`GeminiModel::parameters`].
    pub fn stream_param_range(&self, k: usize) -> std::ops::Range<usize> {
        let per = self.streams[0].param_count();
        k * per..(k + 1) * per
    }

    /// Zeroes the last weight matrix of every stream and of the head, so
    /// each stream is constant and every embedding coincides.
    pub fn collapse_outputs(&mut self) {
        for mlp in self.streams.iter_mut().chain(std::iter::once(&mut self.head)) {
            let last = mlp.layers.last_mut().expect("non-empty mlp");
            last.weight.values_mut().fill(0.0);
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.class_count() {
            return Err(Error::InvalidClass {
                class,
                count: self.class_count(),
            });
        }
        Ok(())
    }

    /// Puts the head and the listed streams on `tape`; other streams map to `None`.
    pub fn bind<'a>(&'a self, tape: &Tape<'a>, active: &[usize]) -> Vec<Option<Var>> {
        let mut vars = Vec::new();
        for (c, s) in self.streams.iter().enumerate() {
            let on = active.contains(&c);
            vars.extend(s.parameters().into_iter().map(|p| on.then(|| tape.param(p))));
        }
        vars.extend(self.head.parameters().into_iter().map(|p| Some(tape.param(p))));
        vars
    }

    fn stream_vars(&self, vars: &[Option<Var>], k: usize) -> Result<Vec<Var>> {
        self.stream_param_range(k)
            .map(|i| vars[i].ok_or_else(|| Error::Invalid(format!("stream {k} is not bound to this tape"))))
            .collect()
    }

    fn head_vars(&self, vars: &[Option<Var>]) -> Vec<Var> {
        let start = self.stream_param_range(self.class_count()).start;
        vars[start..].iter().map(|v| v.expect("head is always bound")).collect()
    }

    pub fn stream_on_tape(&self, tape: &Tape<'_>, vars: &[Option<Var>], k: usize, x: Var) -> Result<Var> {
        self.check_class(k)?;
        self.streams[k].forward(tape, &self.stream_vars(vars, k)?, x)
    }

    pub fn head_on_tape(&self, tape: &Tape<'_>, vars: &[Option<Var>], h: Var) -> Result<Var> {
        self.head.forward(tape, &self.head_vars(vars), h)
    }

    /// Mean loss over a batch of `[n, d]` anchors and positives of class `k`.
    pub fn batch_loss(
        &self,
        tape: &Tape<'_>,
        vars: &[Option<Var>],
        k: usize,
        anchors: Var,
        positives: Var,
        repel: Repel<'_>,
    ) -> Result<BatchLoss> {
        let fa = self.stream_on_tape(tape, vars, k, anchors)?;
        let fp = self.stream_on_tape(tape, vars, k, positives)?;
        let ga = self.head_on_tape(tape, vars, fa)?;
        let gp = self.head_on_tape(tape, vars, fp)?;
        let n = tape.shape(ga)[0];

        let intra = tape.scale(tape.row_distance(fa, fp)?, self.beta);
        let margin_m = tape.add_scalar(tape.row_distance(ga, gp)?, self.margin);
        let push = |gn: Var| -> Result<Var> {
            let gap = tape.sub(margin_m, tape.row_distance(ga, gn)?)?;
            Ok(tape.scale(tape.hinge(gap), 1.0 - self.beta))
        };
        let mut inter: Option<Var> = None;
        let mut add = |term: Var| -> Result<()> {
            inter = Some(match inter {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
            Ok(())
        };
        if let Some((class, x)) = repel.negatives {
            if class == k {
                return Err(Error::SameClassTriplet(k));
            }
            let fneg = self.stream_on_tape(tape, vars, class, x)?;
            add(push(self.head_on_tape(tape, vars, fneg)?)?)?;
        }
        for v in repel.vectors {
            if v.len() != self.output_dim() {
                return Err(Error::LengthMismatch {
                    what: "constraint vector vs embedding dim",
                    left: v.len(),
                    right: self.output_dim(),
                });
            }
            let rows = Tensor::new(vec![n, v.len()], v.repeat(n))?;
            add(push(tape.constant(rows))?)?;
        }
        let inter = inter.ok_or_else(|| Error::Invalid("nothing to repel from".into()))?;
        let total = tape.add(intra, inter)?;
        let loss = tape.mean(total);
        let mean = |v: Var| tape.value_ref(v).iter().sum::<f64>() / n as f64;
        let terms = LossTerms {
            intra: mean(intra),
            margin_m: mean(margin_m),
            inter: mean(inter),
            total: tape.scalar(loss),
        };
        Ok(BatchLoss { loss, terms })
    }

    /// Tape-free stream output for `rows` inputs of class `class`.
    pub fn stream_forward(&self, x: &[f64], rows: usize, class: usize) -> Result<Vec<f64>> {
        self.check_class(class)?;
        if x.len() != rows * self.input_dim() {
            return Err(Error::LengthMismatch {
                what: "inputs vs rows * input dim",
                left: x.len(),
                right: rows * self.input_dim(),
            });
        }
        Ok(self.streams[class].apply(x, rows))
    }

    pub fn embed(&self, x: &[f64], rows: usize, class: usize) -> Result<Vec<f64>> {
        let h = self.stream_forward(x, rows, class)?;
        Ok(self.head.apply(&h, rows))
    }

    /// Embeds every sample through the stream of its own label.
    pub fn embed_dataset(&self, ds: &Dataset) -> Result<EmbeddingSet> {
        if ds.class_count() > self.class_count() {
            return Err(Error::InvalidClass {
                class: ds.class_count() - 1,
                count: self.class_count(),
            });
        }
        let m = self.output_dim();
        let mut out = vec![0.0; ds.len() * m];
        for (c, members) in ds.class_index().iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let z = self.embed(&ds.gather(members), members.len(), c)?;
            for (j, &i) in members.iter().enumerate() {
                out[i * m..(i + 1) * m].copy_from_slice(&z[j * m..(j + 1) * m]);
            }
        }
        EmbeddingSet::new(out, m, ds.labels().to_vec(), EmbeddingSource::Master)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let header = GeminiHeader {
            kind: "gemini".into(),
            classes: self.class_count(),
            stream_dims: self.streams[0].dims(),
            stream_relu_output: self.streams[0].relu_output,
            head_dims: self.head.dims(),
            beta: self.beta,
            margin: self.margin,
            seed,
        };
        persist::write_file(path, &persist::encode(&header, &self.parameters())?)
    }

    /// Loads a model and the seed it was trained with.
    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let (h, values): (GeminiHeader, Vec<f64>) = persist::decode(&persist::read_file(path)?, path)?;
        if h.kind != "gemini" || h.stream_dims.len() < 2 || h.head_dims.len() < 2 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 8,
                msg: format!("not a gemini model header (kind {:?})", h.kind),
            });
        }
        let mut rng = crate::seed::rng(0, 0, 0);
        let streams = (0..h.classes)
            .map(|_| Mlp::new(&mut rng, &h.stream_dims, h.stream_relu_output))
            .collect();
        let head = Mlp::new(&mut rng, &h.head_dims, false);
        let mut model = GeminiModel::from_parts(streams, head, h.beta, h.margin)?;
        persist::fill(model.parameters_mut(), &values, path)?;
        Ok((model, h.seed))
    }
}

fn single_row(tape: &Tape<'_>, x: &[f64], dim: usize) -> Result<Var> {
    if x.len() != dim {
        return Err(Error::LengthMismatch {
            what: "sample features vs input dim",
            left: x.len(),
            right: dim,
        });
    }
    Ok(tape.constant(Tensor::new(vec![1, dim], x.to_vec())?))
}

fn check_positive(anchor: &LabeledSample<'_>, positive: &LabeledSample<'_>) -> Result<()> {
    if anchor.label != positive.label {
        return Err(Error::Invalid(format!(
            "positive has class {} but anchor has class {}",
            positive.label, anchor.label
        )));
    }
    Ok(())
}

/// Loss terms of a single triplet.
pub fn gemini_loss(
    model: &GeminiModel,
    anchor: LabeledSample<'_>,
    positive: LabeledSample<'_>,
    negative: LabeledSample<'_>,
) -> Result<LossTerms> {
    check_positive(&anchor, &positive)?;
    let k = anchor.label;
    let tape = Tape::new();
    let vars = model.bind(&tape, &[k, negative.label]);
    let d = model.input_dim();
    let xa = single_row(&tape, anchor.features, d)?;
    let xp = single_row(&tape, positive.features, d)?;
    let xn = single_row(&tape, negative.features, d)?;
    let repel = Repel {
        negatives: Some((negative.label, xn)),
        vectors: &[],
    };
    Ok(model.batch_loss(&tape, &vars, k, xa, xp, repel)?.terms)
}

/// Loss terms of an anchor/positive pair pushed away from `constraint`.
pub fn gemini_loss_constrained(
    model: &GeminiModel,
    anchor: LabeledSample<'_>,
    positive: LabeledSample<'_>,
    constraint: &[f64],
) -> Result<LossTerms> {
    check_positive(&anchor, &positive)?;
    let k = anchor.label;
    let tape = Tape::new();
    let vars = model.bind(&tape, &[k]);
    let d = model.input_dim();
    let xa = single_row(&tape, anchor.features, d)?;
    let xp = single_row(&tape, positive.features, d)?;
    let c = [constraint.to_vec()];
    let repel = Repel {
        negatives: None,
        vectors: &c,
    };
    Ok(model.batch_loss(&tape, &vars, k, xa, xp, repel)?.terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Dense;

    fn dense(w: &[f64], inputs: usize, outputs: usize) -> Dense {
        Dense {
            weight: Tensor::new(vec![inputs, outputs], w.to_vec()).unwrap(),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    /// Identity streams; the head scales the first coordinate by 1/3 and drops the second.
    fn toy(beta: f64, margin: f64) -> GeminiModel {
        let stream = Mlp {
            layers: vec![Dense::identity(2)],
            relu_output: false,
        };
        let head = Mlp {
            layers: vec![dense(&[1.0 / 3.0, 0.0, 0.0, 0.0], 2, 2)],
            relu_output: false,
        };
        GeminiModel::from_parts(vec![stream.clone(), stream], head, beta, margin).unwrap()
    }

    fn s(f: &[f64], label: usize) -> LabeledSample<'_> {
        LabeledSample { features: f, label }
    }

    #[test]
    fn indicator_values() {
        assert_eq!(indicator(3, 3), 1);
        assert_eq!(indicator(3, 4), 0);
    }

    #[test]
    fn hand_example() {
        // f(x) = (0,0), f(x+) = (3,4); g(x) = (0,0), g(x+) = (1,0), g(x-) = (3,0).
        let m = toy(0.5, 1.0);
        let t = gemini_loss(&m, s(&[0.0, 0.0], 0), s(&[3.0, 4.0], 0), s(&[9.0, 0.0], 1)).unwrap();
        assert!((t.intra - 2.5).abs() < 1e-12);
        assert!((t.margin_m - 2.0).abs() < 1e-12);
        assert_eq!(t.inter, 0.0);
        assert!((t.total - 2.5).abs() < 1e-12);
    }

    #[test]
    fn constrained_hand_example() {
        let m = toy(0.5, 1.0);
        let t = gemini_loss_constrained(&m, s(&[0.0, 0.0], 0), s(&[3.0, 4.0], 0), &[1.0, 0.0]).unwrap();
        assert!((t.inter - 0.5).abs() < 1e-12);
        assert!((t.total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn beta_extremes() {
        let a = [0.0, 0.0];
        let p = [3.0, 4.0];
        let n = [3.0, 0.0];
        let t0 = gemini_loss(&toy(0.0, 1.0), s(&a, 0), s(&p, 0), s(&n, 1)).unwrap();
        assert_eq!(t0.intra, 0.0);
        assert!((t0.inter - 1.0).abs() < 1e-12);
        let t1 = gemini_loss(&toy(1.0, 1.0), s(&a, 0), s(&p, 0), s(&n, 1)).unwrap();
        assert_eq!(t1.inter, 0.0);
        assert!((t1.total - 5.0).abs() < 1e-12);
    }

    #[test]
    fn same_class_negative_rejected() {
        let m = toy(0.5, 1.0);
        let err = gemini_loss(&m, s(&[0.0, 0.0], 1), s(&[1.0, 0.0], 1), s(&[2.0, 0.0], 1)).unwrap_err();
        assert!(matches!(err, Error::SameClassTriplet(1)));
    }

    #[test]
    fn collapsed_model_loss() {
        let mut rng = crate::seed::rng(1, 0, 0);
        let mut m = GeminiModel::new(&mut rng, 4, 3, &[6, 5], &[3, 2], 0.005, 3.0).unwrap();
        m.collapse_outputs();
        let t = gemini_loss(&m, s(&[0.1, 0.2, 0.3, 0.4], 0), s(&[0.9, 0.1, 0.0, 0.5], 0), s(&[0.3; 4], 2)).unwrap();
        assert!((t.total - 0.995 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::seed::rng(4, 0, 0);
        let m = GeminiModel::new(&mut rng, 5, 3, &[4, 3], &[2], 0.1, 2.0).unwrap();
        let path = dir.path().join("g.bin");
        m.save(&path, 17).unwrap();
        let (back, seed) = GeminiModel::load(&path).unwrap();
        assert_eq!(seed, 17);
        assert_eq!(back, m);
    }

    #[test]
    fn embed_dataset_routes_by_label() {
        let m = toy(0.5, 1.0);
        let ds = Dataset::new(vec![3.0, 1.0, 6.0, 2.0], 2, vec![1, 0], 2).unwrap();
        let z = m.embed_dataset(&ds).unwrap();
        assert_eq!(z.row(0), &[1.0, 0.0]);
        assert_eq!(z.row(1), &[2.0, 0.0]);
    }
}
