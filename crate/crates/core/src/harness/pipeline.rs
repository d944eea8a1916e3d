//! One episode through encoder, correlation matching, class-relation
//! refinement, classifier and losses.

use crate::crr::{refined_kernel_graph, CrrInputs, CrrReport};
use crate::encoder::encode_graph;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::harness::model::{AblationFlags, Model, ModelVars};
use crate::loss_head::{ce_graph, classifier_graph, dice_graph, total_graph, ClassifierOptions, OneHotLabels, ProbabilityMap};
use crate::mask::Mask;
use crate::pcm::{foreground_extract_graph, pcm_loss_graph, PcmReport};

/// Loss components of one episode; `be` is 0 without correlation matching
/// and `dc` is reported even when it is excluded from `all`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    pub se: f64,
    pub be: f64,
    pub dc: f64,
    pub all: f64,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    pub probs: ProbabilityMap,
    /// Present when the episode carries a query mask.
    pub losses: Option<Losses>,
    pub crr: Option<CrrReport>,
    pub pcm: Option<PcmReport>,
}

impl EpisodeOutput {
    pub fn prediction(&self) -> Mask {
        self.probs.argmax()
    }
}

/// Graph nodes of one forward pass.
pub(crate) struct Forward {
    pub probs: Var,
    pub loss: Option<Var>,
    pub se: Option<Var>,
    pub be: Option<Var>,
    pub dc: Option<Var>,
    pub crr: Option<CrrReport>,
    pub pcm: Option<PcmReport>,
}

/// Builds the episode graph. With `with_loss` false (or no query mask) the
/// loss nodes and the matching branch are skipped.
pub(crate) fn forward(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    e: &Episode,
    flags: AblationFlags,
    with_loss: bool,
) -> Result<Forward> {
    e.validate()?;
    let hp = model.hp();
    if e.image_dims() != model.shape.image_dims {
        return Err(Error::dims("run_episode", format!("images {:?}, model {:?}", e.image_dims(), model.shape.image_dims)));
    }
    if e.shots() > model.shape.layout.shots {
        return Err(Error::dims("run_episode", format!("{} shots, model built for {}", e.shots(), model.shape.layout.shots)));
    }
    let (hl, wl) = model.feature_dims()?;
    let fq = encode_graph(g, &e.query_image, &model.encoder, &vars.encoder)?;
    let mut fs = Vec::with_capacity(e.shots());
    let mut small = Vec::with_capacity(e.shots());
    let mut fg = Vec::with_capacity(e.shots());
    let mut pixels = Vec::with_capacity(e.shots());
    for shot in &e.support {
        let m = shot.mask.downsample((hl, wl))?;
        if m.count(1) == 0 || shot.mask.count(1) == 0 {
            return Err(Error::EmptyForeground);
        }
        let f = encode_graph(g, &shot.image, &model.encoder, &vars.encoder)?;
        fg.push(foreground_extract_graph(g, f, &m)?);
        pixels.push(shot.mask.count(1));
        fs.push(f);
        small.push(m);
    }

    let with_loss = with_loss && e.query_mask.is_some();
    let dl = hp.feature_dim;
    let (be, pcm) = if flags.pcm_on && with_loss {
        let flat = g.reshape(fq, &[dl, hl * wl])?;
        let (be, rep) = pcm_loss_graph(g, flat, &fg, &vars.pcm, hp)?;
        (Some(be), Some(rep))
    } else {
        (None, None)
    };

    let (kernel, crr) = if flags.crr_on {
        let mut memory = Vec::new();
        for &c in &model.shape.base_classes {
            if c != e.class_id && model.memory.len(c) > 0 {
                memory.push((c, model.memory.pick(c)?));
            }
        }
        let inputs = CrrInputs { fq, support_fg: &fg, support_pixels: &pixels, memory: &memory };
        let (k, rep) = refined_kernel_graph(g, &inputs, &vars.crr, &model.shape.layout, hp)?;
        (k, Some(rep))
    } else {
        (vars.crr.q_k, None)
    };
    let pad = (hp.kernel_h - 1) / 2;
    let rq = g.conv2d(fq, kernel, None, 1, pad)?;
    let mut supports = Vec::with_capacity(fs.len());
    for (f, m) in fs.iter().zip(&small) {
        supports.push((g.conv2d(*f, kernel, None, 1, pad)?, m));
    }
    let opts = ClassifierOptions { alpha: hp.classifier_scale, window: hp.pool_window, classes: 2 };
    let probs = classifier_graph(g, rq, &supports, &opts, model.shape.image_dims)?;

    let mut out = Forward { probs, loss: None, se: None, be, dc: None, crr, pcm };
    if with_loss {
        let labels = OneHotLabels::from_mask(e.query_mask.as_ref().expect("checked above"), 2)?;
        let se = ce_graph(g, probs, &labels)?;
        let dc = dice_graph(g, probs, &labels)?;
        let used_dc = flags.dcl_on.then_some(dc);
        out.loss = Some(total_graph(g, se, be, used_dc, hp.lambda_be, hp.lambda_dc)?);
        out.se = Some(se);
        out.dc = Some(dc);
    }
    Ok(out)
}

pub(crate) fn losses_of(g: &Graph, f: &Forward) -> Option<Losses> {
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    f.loss.map(|l| Losses { se: val(f.se), be: val(f.be), dc: val(f.dc), all: g.value(l).data()[0] })
}

/// Runs one episode with the model's parameters held fixed. Returns the
/// query probability map and, when the query mask is known, the losses.
pub fn run_episode(e: &Episode, model: &Model, flags: AblationFlags) -> Result<EpisodeOutput> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let f = forward(&mut g, model, &vars, e, flags, true)?;
    let losses = losses_of(&g, &f);
    Ok(EpisodeOutput { probs: ProbabilityMap { p: g.value(f.probs).clone() }, losses, crr: f.crr, pcm: f.pcm })
}

/// Query prediction only; skips the loss-only matching branch.
pub fn predict(e: &Episode, model: &Model) -> Result<Mask> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let f = forward(&mut g, model, &vars, e, model.shape.flags, false)?;
    Ok(ProbabilityMap { p: g.value(f.probs).clone() }.argmax())
}
