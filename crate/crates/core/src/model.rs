//! The full network: stub backbones, landmark-guided encoder, cross
//! similarity head and the optional vision-language branch.

use std::path::Path;

use crate::backbones::{ImageSample, PatchEncoder, PromptBank, TeacherImage};
use crate::config::RunConfig;
use crate::csl::Csl;
use crate::error::{Error, Result};
use crate::lgae::{Lgae, TokenBundle};
use crate::nn::{Ctx, Mode};
use crate::rng::Rng;
use crate::tensor::adam::AdamState;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::params::ParamStore;
use crate::tensor::{Tensor, Var};
use crate::vles::{SemanticOutput, Vles};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub appearance: PatchEncoder,
    /// Frozen geometry stub; present with landmark guidance.
    pub geometry: Option<PatchEncoder>,
    pub lgae: Lgae,
    pub csl: Csl,
    /// Frozen teacher image stub; present with the vision-language branch.
    pub teacher: Option<TeacherImage>,
    pub vles: Option<Vles>,
    pub prompts: PromptBank,
}

/// Anchor-pathway outputs for one image batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: TokenBundle,
    pub semantic: Option<SemanticOutput>,
}

/// Logits of a pair batch, each `(B, C)`.
#[derive(Clone, Debug)]
pub struct PairOutputs {
    pub vis_a: Var,
    pub vis_p: Var,
    pub sem_a: Option<Var>,
    pub sem_p: Option<Var>,
    pub anchor: Encoded,
    pub positive: Encoded,
}

/// Eval-mode results for a batch of single images.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `(B, C)` semantic logits, with the vision-language branch.
    pub y_sem: Option<Tensor>,
    /// `(B, C)` visual logits, without it.
    pub y_vis: Option<Tensor>,
    /// `(B, d_clip)` unit visual embeddings, with the vision-language branch.
    pub v: Option<Tensor>,
    pub predictions: Vec<usize>,
}

impl Model {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config.model;
        let flags = config.ablation;
        let size = config.data.image_size;
        let root = Rng::new(config.seed).split("init");
        let mut store = ParamStore::new();
        let appearance = PatchEncoder::new(&mut store, &mut root.split("appearance"), "backbone.appearance", cfg, size, false)?;
        let geometry = if flags.landmark_guidance {
            Some(PatchEncoder::new(&mut store, &mut root.split("geometry"), "backbone.geometry", cfg, size, true)?)
        } else {
            None
        };
        let lgae = Lgae::new(&mut store, &mut root.split("lgae"), cfg, flags, size)?;
        let csl = Csl::new(&mut store, &mut root.split("csl"), cfg)?;
        let prompts = PromptBank::new(&cfg.class_names, config.vles.template, cfg.d_clip)?;
        let (teacher, vles) = if flags.vles {
            let teacher = TeacherImage::new(&mut store, &mut root.split("teacher"), cfg, size)?;
            let vles = Vles::new(&mut store, &mut root.split("vles"), cfg, &config.vles, prompts.t_fix.clone())?;
            (Some(teacher), Some(vles))
        } else {
            (None, None)
        };
        Ok(Model {
            config: config.clone(),
            store,
            appearance,
            geometry,
            lgae,
            csl,
            teacher,
            vles,
            prompts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.prompts.num_classes()
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Backbones, encoder and (when enabled) the semantic branch.
    pub fn encode(&self, ctx: &mut Ctx, images: &[&ImageSample]) -> Result<Encoded> {
        let appearance = self.appearance.forward(ctx, images)?;
        let geometry = match &self.geometry {
            Some(g) => Some(g.forward(ctx, images)?),
            None => None,
        };
        let tokens = self.lgae.forward(ctx, &appearance, geometry.as_deref())?;
        let semantic = match (&self.teacher, &self.vles) {
            (Some(t), Some(v)) => {
                let f_tea = t.forward(ctx, images)?;
                Some(v.forward(ctx, tokens.z_cls, f_tea)?)
            }
            _ => None,
        };
        Ok(Encoded { tokens, semantic })
    }

    pub fn forward_pair(&self, ctx: &mut Ctx, anchors: &[&ImageSample], positives: &[&ImageSample]) -> Result<PairOutputs> {
        if anchors.len() != positives.len() {
            return Err(Error::shape("pair batch", &[anchors.len()], &[positives.len()]));
        }
        let anchor = self.encode(ctx, anchors)?;
        let positive = self.encode(ctx, positives)?;
        let (vis_a, vis_p) = self.csl.forward(ctx, anchor.tokens.x, positive.tokens.x, &anchor.tokens.group_sizes)?;
        Ok(PairOutputs {
            vis_a,
            vis_p,
            sem_a: anchor.semantic.map(|s| s.y_sem),
            sem_p: positive.semantic.map(|s| s.y_sem),
            anchor,
            positive,
        })
    }

    /// Visual logits of images paired with themselves.
    pub fn self_paired_visual(&self, ctx: &mut Ctx, encoded: &Encoded) -> Result<Var> {
        let x = encoded.tokens.x;
        Ok(self.csl.forward(ctx, x, x, &encoded.tokens.group_sizes)?.0)
    }

    /// Eval-mode prediction on the anchor pathway only. Without the
    /// vision-language branch the visual head scores each image paired with
    /// itself.
    pub fn infer(&self, images: &[&ImageSample]) -> Result<Inference> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let enc = self.encode(&mut ctx, images)?;
        let out = match enc.semantic {
            Some(s) => Inference {
                y_sem: Some(ctx.value(s.y_sem).clone()),
                y_vis: None,
                v: Some(ctx.value(s.v).clone()),
                predictions: argmax_rows(ctx.value(s.y_sem)),
            },
            None => {
                let y = self.self_paired_visual(&mut ctx, &enc)?;
                Inference {
                    y_sem: None,
                    y_vis: Some(ctx.value(y).clone()),
                    v: None,
                    predictions: argmax_rows(ctx.value(y)),
                }
            }
        };
        Ok(out)
    }

    pub fn predict(&self, image: &ImageSample) -> Result<usize> {
        Ok(self.infer(&[image])?.predictions[0])
    }

    pub fn checkpoint(&self, adam: Option<&AdamState>) -> Checkpoint {
        Checkpoint::capture(self.config.seed, self.config.to_toml(), &self.store, adam)
    }

    /// Rebuilds the model described by the checkpoint's config and loads its
    /// weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse(&ckpt.config, &[])?;
        let mut model = Model::new(&config)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Index of each row's maximum; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(cols.max(1))
        .map(|row| (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationFlags;

    fn image(seed: u64, label: usize) -> ImageSample {
        let mut rng = Rng::new(seed);
        ImageSample::new(format!("img{seed}"), label, Tensor::from_fn(&[3, 32, 32], |_| rng.unit())).unwrap()
    }

    fn with_flags(landmark_guidance: bool, bgca: bool, vles: bool) -> RunConfig {
        RunConfig {
            ablation: AblationFlags {
                landmark_guidance,
                bgca,
                vles,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let t = Tensor::new(&[2, 3], vec![1.0, 3.0, 3.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }

    #[test]
    fn ablations_add_parameters_monotonically() {
        let counts: Vec<usize> = [(false, false, false), (true, false, false), (true, true, false), (true, true, true)]
            .iter()
            .map(|&(l, b, v)| Model::new(&with_flags(l, b, v)).unwrap().trainable_count())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    #[test]
    fn pair_outputs_have_class_shapes_and_swap() {
        let model = Model::new(&RunConfig::default()).unwrap();
        let (a, b, c, d) = (image(1, 0), image(2, 0), image(3, 4), image(4, 4));
        let run = |x: &[&ImageSample], y: &[&ImageSample]| {
            let mut ctx = Ctx::new(&model.store, Mode::Eval);
            let o = model.forward_pair(&mut ctx, x, y).unwrap();
            let v = |t: Var| ctx.value(t).clone();
            (v(o.vis_a), v(o.vis_p), v(o.sem_a.unwrap()), v(o.sem_p.unwrap()))
        };
        let (va, vp, sa, sp) = run(&[&a, &c], &[&b, &d]);
        assert_eq!(va.shape(), &[2, 7]);
        assert_eq!(sa.shape(), &[2, 7]);
        let (wa, wp, ta, tp) = run(&[&b, &d], &[&a, &c]);
        assert_eq!((va, vp, sa, sp), (wp, wa, tp, ta));
    }

    #[test]
    fn visual_only_model_has_no_semantic_logits() {
        let model = Model::new(&with_flags(true, true, false)).unwrap();
        let full = Model::new(&RunConfig::default()).unwrap();
        assert!(model.trainable_count() < full.trainable_count());
        let (a, b) = (image(5, 1), image(6, 1));
        let mut ctx = Ctx::new(&model.store, Mode::Eval);
        let o = model.forward_pair(&mut ctx, &[&a], &[&b]).unwrap();
        assert!(o.sem_a.is_none() && o.sem_p.is_none());
        let inf = model.infer(&[&a]).unwrap();
        assert!(inf.y_sem.is_none());
        assert!(inf.predictions[0] < 7);
    }

    #[test]
    fn inference_ignores_batch_companions() {
        for flags in [(true, true, true), (true, true, false)] {
            let model = Model::new(&with_flags(flags.0, flags.1, flags.2)).unwrap();
            let imgs: Vec<ImageSample> = (0..3).map(|i| image(10 + i, 0)).collect();
            let alone = model.infer(&[&imgs[1]]).unwrap();
            let batch = model.infer(&[&imgs[0], &imgs[1], &imgs[2]]).unwrap();
            let pick = |t: &Option<Tensor>, i: usize| t.as_ref().map(|t| t.row(i).iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            assert_eq!(pick(&alone.y_sem, 0), pick(&batch.y_sem, 1));
            assert_eq!(pick(&alone.y_vis, 0), pick(&batch.y_vis, 1));
            assert_eq!(alone.predictions[0], batch.predictions[1]);
        }
    }
}
