//! Deterministic stand-ins for the pretrained encoders: a trainable
//! appearance patch encoder, a frozen geometry patch encoder, a frozen teacher
//! image readout and hash-seeded class text embeddings.

use std::collections::HashSet;

use crate::config::{ModelConfig, PromptTemplate};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::l2_norm;
use crate::tensor::params::ParamStore;
use crate::tensor::{Tensor, Var};

/// An RGB image with values in `[0, 1]`, stored channel-major `(3, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub label: usize,
    pub pixels: Tensor,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, label: usize, pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
            return Err(Error::shape("image (3, H, H)", &[3], s));
        }
        Ok(ImageSample {
            id: id.into(),
            label,
            pixels,
        })
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

fn check_sizes(images: &[&ImageSample], size: usize) -> Result<()> {
    for img in images {
        if img.pixels.shape() != [3, size, size] {
            return Err(Error::shape("image size", &[3, size, size], img.pixels.shape()));
        }
    }
    Ok(())
}

/// Non-overlapping `patch × patch` tiles of each image, flattened
/// channel-major: `(B, (H/p)·(W/p), 3·p·p)`.
pub fn patchify(images: &[&ImageSample], patch: usize) -> Tensor {
    let size = images[0].size();
    let grid = size / patch;
    let dim = 3 * patch * patch;
    let mut out = Vec::with_capacity(images.len() * grid * grid * dim);
    for img in images {
        let px = img.pixels.data();
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..3 {
                    for y in 0..patch {
                        let row = c * size * size + (gy * patch + y) * size + gx * patch;
                        out.extend_from_slice(&px[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(&[images.len(), grid * grid, dim], out).expect("patch layout")
}

/// Per-channel means over a `pool × pool` grid of equal cells: `(B, 3·pool²)`.
pub fn avg_pool(images: &[&ImageSample], pool: usize) -> Tensor {
    let size = images[0].size();
    let cell = size / pool;
    let norm = 1.0 / (cell * cell) as f64;
    let mut out = Vec::with_capacity(images.len() * 3 * pool * pool);
    for img in images {
        let px = img.pixels.data();
        for c in 0..3 {
            for py in 0..pool {
                for pxi in 0..pool {
                    let mut acc = 0.0;
                    for y in 0..cell {
                        let row = c * size * size + (py * cell + y) * size + pxi * cell;
                        acc += px[row..row + cell].iter().sum::<f64>();
                    }
                    out.push(acc * norm);
                }
            }
        }
    }
    Tensor::new(&[images.len(), 3 * pool * pool], out).expect("pool layout")
}

/// Patch embedding at several patch sizes: linear map then gelu per scale.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub scales: Vec<Linear>,
    pub patch_sizes: Vec<usize>,
    pub image_size: usize,
}

impl PatchEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cfg: &ModelConfig,
        image_size: usize,
        frozen: bool,
    ) -> Result<Self> {
        let scales = cfg
            .patch_sizes
            .iter()
            .zip(&cfg.scale_dims)
            .enumerate()
            .map(|(i, (&p, &d))| Linear::build(store, rng, &format!("{name}.s{}", i + 1), 3 * p * p, d, true, frozen))
            .collect::<Result<_>>()?;
        Ok(PatchEncoder {
            scales,
            patch_sizes: cfg.patch_sizes.clone(),
            image_size,
        })
    }

    /// One `(B, tokens_i, dim_i)` grid per scale.
    pub fn forward(&self, ctx: &mut Ctx, images: &[&ImageSample]) -> Result<Vec<Var>> {
        check_sizes(images, self.image_size)?;
        let mut grids = Vec::with_capacity(self.scales.len());
        for (lin, &p) in self.scales.iter().zip(&self.patch_sizes) {
            let patches = ctx.constant(patchify(images, p));
            let h = lin.forward(ctx, patches)?;
            grids.push(ctx.gelu(h));
        }
        Ok(grids)
    }
}

/// Frozen linear readout of the average-pooled image.
#[derive(Clone, Debug)]
pub struct TeacherImage {
    pub readout: Linear,
    pub pool: usize,
    pub image_size: usize,
}

impl TeacherImage {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, image_size: usize) -> Result<Self> {
        let fan_in = 3 * cfg.teacher_pool * cfg.teacher_pool;
        Ok(TeacherImage {
            readout: Linear::build(store, rng, "teacher.image", fan_in, cfg.d_clip, true, true)?,
            pool: cfg.teacher_pool,
            image_size,
        })
    }

    /// `(B, d_clip)` embeddings.
    pub fn forward(&self, ctx: &mut Ctx, images: &[&ImageSample]) -> Result<Var> {
        check_sizes(images, self.image_size)?;
        let pooled = ctx.constant(avg_pool(images, self.pool));
        self.readout.forward(ctx, pooled)
    }
}

/// Class names, the prompt template and the fixed unit-norm text features.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub class_names: Vec<String>,
    pub template: PromptTemplate,
    /// `(C, d_clip)`, unit rows.
    pub t_fix: Tensor,
}

/// Bound on `|cos|` between any two text feature rows.
pub const MAX_PROMPT_COSINE: f64 = 0.9;

impl PromptBank {
    pub fn new(class_names: &[String], template: PromptTemplate, d_clip: usize) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::config("model.class_names", "must not be empty"));
        }
        let mut seen = HashSet::new();
        for n in class_names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateClassName(n.clone()));
            }
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(class_names.len());
        for name in class_names {
            let rendered = template.render(name);
            let mut rng = Rng::new(fnv1a64(rendered.as_bytes()));
            let row = (0..100_000)
                .filter_map(|_| unit_vector(&mut rng, d_clip))
                .find(|cand| {
                    rows.iter().all(|r| {
                        let cos: f64 = r.iter().zip(cand).map(|(a, b)| a * b).sum();
                        cos.abs() < MAX_PROMPT_COSINE
                    })
                })
                .ok_or_else(|| Error::config("model.d_clip", "too small to separate the class prompts"))?;
            rows.push(row);
        }
        let t_fix = Tensor::new(&[class_names.len(), d_clip], rows.concat())?;
        Ok(PromptBank {
            class_names: class_names.to_vec(),
            template,
            t_fix,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// A Gaussian direction whose computed norm is exactly one, so that
/// renormalising it is the identity. `None` if this draw misses.
fn unit_vector(rng: &mut Rng, d: usize) -> Option<Vec<f64>> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = l2_norm(&v);
    if n < 1e-6 {
        return None;
    }
    let u: Vec<f64> = v.iter().map(|x| x / n).collect();
    (l2_norm(&u) == 1.0).then_some(u)
}
