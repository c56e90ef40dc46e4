//! The four classifiers and the object feature used by the visual argument head.
//!
//! Every head classifies `[h ; g]` (mentions) or `[h ; g ; t]` (arguments)
//! with one linear layer, where `g` is the fused context vector for `h` and
//! `t` is the trigger word encoding (text) or the image CLS vector (visual).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{EntitySpan, ObjectBox};
use crate::encoders::{patch_index, EncoderConfig, ImageEncoding, TextEncoding};
use crate::error::{Error, Result};
use crate::fusion::{
    adapter_backward, adapter_forward_cached, context_backward, cosine_backward, cosine_forward, project_context,
    AdapterCache, AdapterParams, CosineCache, FusionContext, FusionMode, ProjectedContext, Task,
};
use crate::tensor::{argmax, concat, join, Linear, Matrix, Params};

/// How the context vector `g` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionSetting {
    Adapter,
    Cosine,
    /// `g = 0`: no cross-modal context at all.
    Bypass,
}

impl From<FusionMode> for FusionSetting {
    fn from(m: FusionMode) -> Self {
        match m {
            FusionMode::Adapter => FusionSetting::Adapter,
            FusionMode::Cosine => FusionSetting::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// Indexed by `Task::index`.
    pub linears: Vec<Linear>,
}

impl ClassifierParams {
    pub fn new<R: Rng>(d: usize, num_events: usize, num_roles: usize, rng: &mut R) -> Self {
        let linears = Task::ALL
            .iter()
            .map(|&t| {
                let (inp, out) = Self::shape(t, d, num_events, num_roles);
                Linear::scaled(inp, out, rng)
            })
            .collect();
        Self { linears }
    }

    pub fn zeros(d: usize, num_events: usize, num_roles: usize) -> Self {
        let linears = Task::ALL
            .iter()
            .map(|&t| {
                let (inp, out) = Self::shape(t, d, num_events, num_roles);
                Linear::zeros(inp, out)
            })
            .collect();
        Self { linears }
    }

    /// `(input, output)` width of a task's classifier.
    pub fn shape(task: Task, d: usize, num_events: usize, num_roles: usize) -> (usize, usize) {
        if task.is_argument() {
            (3 * d, num_roles)
        } else {
            (2 * d, num_events)
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            linears: self
                .linears
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn get(&self, task: Task) -> &Linear {
        &self.linears[task.index()]
    }
}

impl Params for ClassifierParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for t in Task::ALL {
            self.linears[t.index()].visit(&join(prefix, t.name()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for t in Task::ALL {
            self.linears[t.index()].visit_mut(&join(prefix, t.name()), f);
        }
    }
}

/// Adapter plus classifiers: everything downstream of the encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionHeads {
    pub adapter: AdapterParams,
    pub classifiers: ClassifierParams,
    pub setting: FusionSetting,
}

impl FusionHeads {
    pub fn zeros_like(&self) -> Self {
        Self {
            adapter: self.adapter.zeros_like(),
            classifiers: self.classifiers.zeros_like(),
            setting: self.setting,
        }
    }

    pub fn dim(&self) -> usize {
        self.adapter.dim()
    }

    pub fn prepare<'c>(&self, ctx: &'c FusionContext) -> Result<PreparedContext<'c>> {
        PreparedContext::new(self.setting, &self.adapter, ctx)
    }

    /// Logits for one item. `h` is the query feature; `third` is present for
    /// argument tasks.
    pub fn forward_item(
        &self,
        task: Task,
        h: &[f64],
        third: Option<&[f64]>,
        ctx: &PreparedContext<'_>,
    ) -> Result<(Vec<f64>, ItemCache)> {
        let d = self.dim();
        if h.len() != d || third.is_some_and(|t| t.len() != d) {
            return Err(Error::Contract(format!("head inputs must have width {d}")));
        }
        if task.is_argument() != third.is_some() {
            return Err(Error::Contract(format!(
                "task {task} expects {} inputs",
                if task.is_argument() { 3 } else { 2 }
            )));
        }
        let (g, fuse) = ctx.fuse(&self.adapter, h, task)?;
        let input = match third {
            Some(t) => concat(&[h, &g, t]),
            None => concat(&[h, &g]),
        };
        let logits = self.classifiers.get(task).forward(&input);
        Ok((logits, ItemCache { task, input, fuse }))
    }

    /// Backward for one item; returns `(dh, dthird)`.
    pub fn backward_item(
        &self,
        cache: &ItemCache,
        dlogits: &[f64],
        ctx: &PreparedContext<'_>,
        grad: &mut FusionHeads,
        cg: &mut ContextGrad,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let d = self.dim();
        let t = cache.task.index();
        let dinput = self.classifiers.linears[t].backward(&cache.input, dlogits, &mut grad.classifiers.linears[t]);
        let mut dh = dinput[..d].to_vec();
        let dq = ctx.backward(&self.adapter, &cache.fuse, &dinput[d..2 * d], &mut grad.adapter, cg);
        crate::tensor::add_into(&mut dh, &dq);
        let dthird = cache.task.is_argument().then(|| dinput[2 * d..].to_vec());
        (dh, dthird)
    }
}

impl Params for FusionHeads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.adapter.visit(&join(prefix, "adapter"), f);
        self.classifiers.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
        self.classifiers.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone)]
pub struct ItemCache {
    task: Task,
    input: Vec<f64>,
    fuse: FuseCache,
}

#[derive(Debug, Clone)]
pub enum FuseCache {
    Adapter(AdapterCache),
    Cosine(CosineCache, Vec<f64>),
    Bypass,
}

/// A fusion context with its key/value projections computed once.
#[derive(Debug, Clone)]
pub struct PreparedContext<'c> {
    setting: FusionSetting,
    ctx: &'c FusionContext,
    pc: Option<ProjectedContext>,
}

/// Gradient accumulators for one prepared context.
#[derive(Debug, Clone)]
pub struct ContextGrad {
    dpc: Option<ProjectedContext>,
    dctx: Matrix,
}

impl<'c> PreparedContext<'c> {
    pub fn new(setting: FusionSetting, adapter: &AdapterParams, ctx: &'c FusionContext) -> Result<Self> {
        if ctx.is_empty() {
            return Err(Error::Contract("fusion context is empty".into()));
        }
        if ctx.keys_values.cols() != adapter.dim() {
            return Err(Error::Contract(format!(
                "context width {} does not match model width {}",
                ctx.keys_values.cols(),
                adapter.dim()
            )));
        }
        let pc = match setting {
            FusionSetting::Adapter => Some(project_context(adapter, ctx)?),
            _ => None,
        };
        Ok(Self { setting, ctx, pc })
    }

    pub fn context(&self) -> &FusionContext {
        self.ctx
    }

    pub fn grad(&self) -> ContextGrad {
        let (n, d) = (self.ctx.len(), self.ctx.keys_values.cols());
        ContextGrad {
            dpc: self.pc.as_ref().map(|_| ProjectedContext::zeros(n, d)),
            dctx: Matrix::zeros(n, d),
        }
    }

    pub fn fuse(&self, adapter: &AdapterParams, q: &[f64], task: Task) -> Result<(Vec<f64>, FuseCache)> {
        match self.setting {
            FusionSetting::Adapter => {
                let pc = self.pc.as_ref().expect("projected in adapter mode");
                let (g, c) = adapter_forward_cached(adapter, q, pc, task)?;
                Ok((g, FuseCache::Adapter(c)))
            }
            FusionSetting::Cosine => {
                let (g, c) = cosine_forward(q, &self.ctx.keys_values);
                Ok((g, FuseCache::Cosine(c, q.to_vec())))
            }
            FusionSetting::Bypass => Ok((vec![0.0; q.len()], FuseCache::Bypass)),
        }
    }

    pub fn backward(
        &self,
        adapter: &AdapterParams,
        cache: &FuseCache,
        dg: &[f64],
        grad: &mut AdapterParams,
        cg: &mut ContextGrad,
    ) -> Vec<f64> {
        match cache {
            FuseCache::Adapter(c) => {
                let pc = self.pc.as_ref().expect("projected in adapter mode");
                let dpc = cg.dpc.as_mut().expect("adapter context grad");
                adapter_backward(adapter, c, pc, dg, grad, dpc)
            }
            FuseCache::Cosine(c, q) => cosine_backward(q, &self.ctx.keys_values, c, dg, &mut cg.dctx),
            FuseCache::Bypass => vec![0.0; dg.len()],
        }
    }

    /// Gradient w.r.t. the raw context rows, folding in the key/value projections.
    pub fn finish(&self, adapter: &AdapterParams, cg: ContextGrad, grad: &mut AdapterParams) -> Matrix {
        let mut dctx = cg.dctx;
        if let Some(dpc) = &cg.dpc {
            let d = context_backward(adapter, self.ctx, dpc, grad);
            for (a, b) in dctx.as_mut_slice().iter_mut().zip(d.as_slice()) {
                *a += b;
            }
        }
        dctx
    }
}

/// Mean of the patch rows under a box's top-left, center and bottom-right corners.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeature {
    pub feature: Vec<f64>,
    pub patch_indices: [usize; 3],
}

/// Patch indices of the three probe points of a box already in canonical space.
pub fn object_patch_indices(b: &ObjectBox, enc_grid: crate::encoders::Grid, cfg: &EncoderConfig) -> [usize; 3] {
    let cx = ((b.x1 as u64 + b.x2 as u64) / 2) as u32;
    let cy = ((b.y1 as u64 + b.y2 as u64) / 2) as u32;
    let pi = |x, y| patch_index(x, y, enc_grid, cfg.canonical_size, cfg.patch_size);
    [pi(b.x1, b.y1), pi(cx, cy), pi(b.x2, b.y2)]
}

/// Object feature for a box given in canonical pixel coordinates.
pub fn extract_object_feature(b: &ObjectBox, enc: &ImageEncoding, cfg: &EncoderConfig) -> ObjectFeature {
    let idx = object_patch_indices(b, enc.grid, cfg);
    let d = enc.patches.cols();
    let mut feature = vec![0.0; d];
    for &i in &idx {
        crate::tensor::add_into(&mut feature, enc.patches.row(i));
    }
    feature.iter_mut().for_each(|v| *v /= 3.0);
    ObjectFeature {
        feature,
        patch_indices: idx,
    }
}

/// Logits for word `i` over `{null} ∪ event types`.
pub fn classify_textual_trigger(
    i: usize,
    text: &TextEncoding,
    ctx: &FusionContext,
    params: &FusionHeads,
) -> Result<Vec<f64>> {
    let h = text
        .word(i)
        .ok_or_else(|| Error::Contract(format!("word {i} is outside the encoded sentence")))?;
    let prepared = params.prepare(ctx)?;
    Ok(params.forward_item(Task::TextMention, h, None, &prepared)?.0)
}

/// Logits over `{null} ∪ roles` for an entity given the event's trigger word.
pub fn classify_textual_argument(
    entity: &EntitySpan,
    trigger: usize,
    text: &TextEncoding,
    ctx: &FusionContext,
    params: &FusionHeads,
) -> Result<Vec<f64>> {
    let h = text
        .word(entity.start)
        .ok_or_else(|| Error::Contract("entity is outside the encoded sentence".into()))?;
    let t = text
        .word(trigger)
        .ok_or_else(|| Error::Contract("trigger is outside the encoded sentence".into()))?;
    let prepared = params.prepare(ctx)?;
    Ok(params.forward_item(Task::TextArgument, h, Some(t), &prepared)?.0)
}

pub fn classify_visual_event(image: &ImageEncoding, ctx: &FusionContext, params: &FusionHeads) -> Result<Vec<f64>> {
    let prepared = params.prepare(ctx)?;
    Ok(params.forward_item(Task::VisualMention, &image.cls, None, &prepared)?.0)
}

pub fn classify_visual_argument(
    obj: &ObjectFeature,
    image: &ImageEncoding,
    ctx: &FusionContext,
    params: &FusionHeads,
) -> Result<Vec<f64>> {
    let prepared = params.prepare(ctx)?;
    Ok(params
        .forward_item(Task::VisualArgument, &obj.feature, Some(&image.cls), &prepared)?
        .0)
}

/// Predicted class, optionally restricted to `allowed` (null is always allowed).
pub fn decide(logits: &[f64], allowed: Option<&[usize]>) -> usize {
    match allowed {
        None => argmax(logits),
        Some(allowed) => {
            let masked: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if i == 0 || allowed.contains(&i) {
                        v
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            argmax(&masked)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heads(d: usize, e: usize, r: usize, setting: FusionSetting) -> FusionHeads {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        FusionHeads {
            adapter: AdapterParams::new(d, 2, &mut rng).unwrap(),
            classifiers: ClassifierParams::new(d, e, r, &mut rng),
            setting,
        }
    }

    fn ctx(d: usize) -> FusionContext {
        FusionContext::new(Matrix::from_vec(1, d, vec![0.5; d]), vec!["x".into()]).unwrap()
    }

    #[test]
    fn zero_weight_head_predicts_null() {
        let mut p = heads(4, 3, 2, FusionSetting::Adapter);
        p.classifiers.linears[0] = Linear::zeros(8, 3);
        p.classifiers.linears[0].bias = vec![0.7; 3];
        let enc = TextEncoding {
            cls: vec![0.0; 4],
            tokens: Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]),
            word_map: vec![0],
        };
        let logits = classify_textual_trigger(0, &enc, &ctx(4), &p).unwrap();
        assert_eq!(logits, vec![0.7; 3]);
        assert_eq!(decide(&logits, None), 0);
    }

    #[test]
    fn hand_computed_mention_logits_in_bypass_mode() {
        // with g = 0 the logits only see h: W [h; 0] + b
        let mut p = heads(2, 2, 2, FusionSetting::Bypass);
        p.classifiers.linears[Task::VisualMention.index()] = Linear {
            weight: Matrix::from_vec(2, 4, vec![1.0, 0.0, 5.0, 5.0, 0.0, 2.0, 5.0, 5.0]),
            bias: vec![0.1, -0.1],
        };
        let enc = ImageEncoding {
            cls: vec![3.0, -1.0],
            patches: Matrix::zeros(1, 2),
            grid: Grid { rows: 1, cols: 1 },
        };
        let logits = classify_visual_event(&enc, &ctx(2), &p).unwrap();
        assert!((logits[0] - 3.1).abs() < 1e-12);
        assert!((logits[1] - -2.1).abs() < 1e-12);
    }

    #[test]
    fn masking_never_hides_null() {
        assert_eq!(decide(&[0.0, 5.0, 1.0], Some(&[2])), 2);
        assert_eq!(decide(&[3.0, 5.0, 1.0], Some(&[2])), 0);
    }

    #[test]
    fn full_image_box_probes_three_patches() {
        let cfg = EncoderConfig::default();
        let idx = object_patch_indices(&ObjectBox::new(0, 0, 223, 223), cfg.grid(), &cfg);
        assert_eq!(idx, [0, 90, 195]);
    }

    #[test]
    fn box_inside_one_patch_uses_that_patch() {
        let cfg = EncoderConfig::default();
        let grid = cfg.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ImageEncoding {
            cls: vec![0.0; 3],
            patches: Matrix::random_normal(grid.len(), 3, 1.0, &mut rng),
            grid,
        };
        let f = extract_object_feature(&ObjectBox::new(17, 17, 30, 30), &enc, &cfg);
        assert_eq!(f.patch_indices, [15, 15, 15]);
        for (a, b) in f.feature.iter().zip(enc.patches.row(15)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
