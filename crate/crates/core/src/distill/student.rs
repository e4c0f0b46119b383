use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embedding::{EmbeddingSet, EmbeddingSource};
use crate::error::{Error, Result};
use crate::numerics::{Conv2d, Dense, ImageShape, Mlp, Tape, Tensor, Var};
use crate::persist;

/// Student architecture as written in a config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudentSpec {
    /// `Conv` for image-shaped data, `Mlp` otherwise.
    #[default]
    Auto,
    /// Two 3x3 conv + 2x2 pool blocks, then a hidden dense layer.
    Conv { channels: [usize; 2], dense: usize },
    /// Dense layers `d -> hidden... -> m_out`.
    Mlp { hidden: Vec<usize> },
    /// Conv stem, residual blocks of two 3x3 convs each, pooling, dense head.
    Residual { channels: usize, blocks: usize, dense: usize },
}

impl StudentSpec {
    pub fn default_conv() -> Self {
        StudentSpec::Conv {
            channels: [8, 16],
            dense: 64,
        }
    }

    pub fn default_mlp() -> Self {
        StudentSpec::Mlp { hidden: vec![128, 64] }
    }

    fn resolve(&self, image: Option<ImageShape>) -> Result<StudentSpec> {
        let needs_image = matches!(self, StudentSpec::Conv { .. } | StudentSpec::Residual { .. });
        if needs_image && image.is_none() {
            return Err(Error::Config("convolutional student needs image-shaped input".into()));
        }
        Ok(match self {
            StudentSpec::Auto if image.is_some() => StudentSpec::default_conv(),
            StudentSpec::Auto => StudentSpec::default_mlp(),
            other => other.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Dense,
    Conv(Vec<Conv2d>),
    Residual { stem: Conv2d, blocks: Vec<[Conv2d; 2]> },
}

/// Label-free embedder: raw features in, `m_out` coordinates out.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    spec: StudentSpec,
    input_dim: usize,
    image: Option<ImageShape>,
    body: Body,
    head: Mlp,
}

#[derive(Serialize, Deserialize)]
struct StudentHeader {
    kind: String,
    spec: StudentSpec,
    input_dim: usize,
    image: Option<ImageShape>,
    output_dim: usize,
    seed: u64,
}

fn pooled(size: usize, times: usize) -> usize {
    (0..times).fold(size, |s, _| s / 2)
}

impl StudentModel {
    pub fn new<R: Rng>(
        rng: &mut R,
        spec: &StudentSpec,
        input_dim: usize,
        image: Option<ImageShape>,
        output_dim: usize,
    ) -> Result<Self> {
        if let Some(img) = image {
            if img.dim() != input_dim {
                return Err(Error::Config(format!("image shape {img:?} does not match input dim {input_dim}")));
            }
        }
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config("student input and output dims must be positive".into()));
        }
        let spec = spec.resolve(image)?;
        let (body, flat, hidden) = match &spec {
            StudentSpec::Mlp { hidden } => (Body::Dense, input_dim, hidden.clone()),
            StudentSpec::Conv { channels, dense } => {
                let img = image.expect("resolved with image");
                let c1 = Conv2d::new(rng, img.channels, channels[0], 3, 1);
                let c2 = Conv2d::new(rng, channels[0], channels[1], 3, 1);
                let flat = channels[1] * pooled(img.height, 2) * pooled(img.width, 2);
                (Body::Conv(vec![c1, c2]), flat, vec![*dense])
            }
            StudentSpec::Residual { channels, blocks, dense } => {
                let img = image.expect("resolved with image");
                let stem = Conv2d::new(rng, img.channels, *channels, 3, 1);
                let blocks = (0..*blocks)
                    .map(|_| [Conv2d::new(rng, *channels, *channels, 3, 1), Conv2d::new(rng, *channels, *channels, 3, 1)])
                    .collect();
                let flat = channels * pooled(img.height, 2) * pooled(img.width, 2);
                (Body::Residual { stem, blocks }, flat, vec![*dense])
            }
            StudentSpec::Auto => unreachable!("resolved above"),
        };
        if flat == 0 || hidden.contains(&0) {
            return Err(Error::Config("student layers must be non-empty".into()));
        }
        let mut dims = vec![flat];
        dims.extend(hidden);
        dims.push(output_dim);
        Ok(StudentModel {
            head: Mlp::new(rng, &dims, false),
            spec,
            input_dim,
            image,
            body,
        })
    }

    /// A single affine map `d -> m_out`.
    pub fn linear(dense: Dense) -> Self {
        StudentModel {
            spec: StudentSpec::Mlp { hidden: vec![] },
            input_dim: dense.inputs(),
            image: None,
            body: Body::Dense,
            head: Mlp {
                layers: vec![dense],
                relu_output: false,
            },
        }
    }

    pub fn spec(&self) -> &StudentSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = match &self.body {
            Body::Dense => vec![],
            Body::Conv(convs) => convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect(),
            Body::Residual { stem, blocks } => std::iter::once(stem)
                .chain(blocks.iter().flatten())
                .flat_map(|c| [&c.weight, &c.bias])
                .collect(),
        };
        p.extend(self.head.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = match &mut self.body {
            Body::Dense => vec![],
            Body::Conv(convs) => convs.iter_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect(),
            Body::Residual { stem, blocks } => std::iter::once(stem)
                .chain(blocks.iter_mut().flatten())
                .flat_map(|c| [&mut c.weight, &mut c.bias])
                .collect(),
        };
        p.extend(self.head.parameters_mut());
        p
    }

    pub fn bind<'a>(&'a self, tape: &Tape<'a>) -> Vec<Var> {
        tape.params(&self.parameters())
    }

    /// Forward pass of `[n, d]` inputs to `[n, m_out]`.
    pub fn forward(&self, tape: &Tape<'_>, vars: &[Var], x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let image = |x: Var| -> Result<Var> {
            let img = self.image.expect("conv student has an image shape");
            tape.reshape(x, vec![n, img.channels, img.height, img.width])
        };
        let (flat, used) = match &self.body {
            Body::Dense => (x, 0),
            Body::Conv(convs) => {
                let mut h = image(x)?;
                for (i, c) in convs.iter().enumerate() {
                    h = tape.max_pool2d(tape.relu(c.forward(tape, &vars[2 * i..], h)?))?;
                }
                (tape.flatten(h)?, 2 * convs.len())
            }
            Body::Residual { stem, blocks } => {
                let mut h = tape.relu(stem.forward(tape, vars, image(x)?)?);
                h = tape.max_pool2d(h)?;
                let mut at = 2;
                for [a, b] in blocks {
                    let r = tape.relu(a.forward(tape, &vars[at..], h)?);
                    let r = b.forward(tape, &vars[at + 2..], r)?;
                    h = tape.relu(tape.add(h, r)?);
                    at += 4;
                }
                (tape.flatten(tape.max_pool2d(h)?)?, at)
            }
        };
        self.head.forward(tape, &vars[used..], flat)
    }

    /// Embeds row-major samples; never sees labels.
    pub fn embed_samples(&self, features: &[f64]) -> Result<Vec<f64>> {
        const CHUNK: usize = 500;
        let d = self.input_dim;
        if !features.len().is_multiple_of(d) {
            return Err(Error::LengthMismatch {
                what: "features vs input dim multiple",
                left: features.len(),
                right: d,
            });
        }
        let mut out = Vec::with_capacity(features.len() / d * self.output_dim());
        for chunk in features.chunks(CHUNK * d) {
            let tape = Tape::new();
            let vars = self.bind(&tape);
            let x = tape.constant_slice(vec![chunk.len() / d, d], chunk)?;
            let z = self.forward(&tape, &vars, x)?;
            out.extend_from_slice(&tape.value_ref(z));
        }
        Ok(out)
    }

    /// Embeds every sample of `ds`; labels are attached afterwards for evaluation.
    pub fn embed_dataset(&self, ds: &Dataset) -> Result<EmbeddingSet> {
        if ds.dim() != self.input_dim {
            return Err(Error::LengthMismatch {
                what: "dataset dim vs student input dim",
                left: ds.dim(),
                right: self.input_dim,
            });
        }
        let z = self.embed_samples(ds.features())?;
        EmbeddingSet::new(z, self.output_dim(), ds.labels().to_vec(), EmbeddingSource::Student)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let header = StudentHeader {
            kind: "student".into(),
            spec: self.spec.clone(),
            input_dim: self.input_dim,
            image: self.image,
            output_dim: self.output_dim(),
            seed,
        };
        persist::write_file(path, &persist::encode(&header, &self.parameters())?)
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let (h, values): (StudentHeader, Vec<f64>) = persist::decode(&persist::read_file(path)?, path)?;
        if h.kind != "student" {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 8,
                msg: format!("expected a student model, found {:?}", h.kind),
            });
        }
        let mut rng = crate::seed::rng(0, 0, 0);
        let mut model = StudentModel::new(&mut rng, &h.spec, h.input_dim, h.image, h.output_dim)?;
        persist::fill(model.parameters_mut(), &values, path)?;
        Ok((model, h.seed))
    }
}
