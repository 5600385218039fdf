//! Distillation losses from a frozen teacher.
//!
//! Every loss takes the teacher's output as a plain [`Tensor`], so the
//! teacher is never on the student's tape and receives no gradient.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KdError {
    #[error("student shape {student:?} differs from teacher shape {teacher:?}")]
    ShapeMismatch { student: Vec<usize>, teacher: Vec<usize> },
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("{0} labels for {1} pixels")]
    Labels(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdMethod {
    None,
    Kl,
    Cwd,
    Cirkd,
}

impl KdMethod {
    pub const ALL: [KdMethod; 4] = [KdMethod::None, KdMethod::Kl, KdMethod::Cwd, KdMethod::Cirkd];

    pub fn name(self) -> &'static str {
        match self {
            KdMethod::None => "none",
            KdMethod::Kl => "kl",
            KdMethod::Cwd => "cwd",
            KdMethod::Cirkd => "cirkd",
        }
    }
}

impl fmt::Display for KdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KdMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KdMethod::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown distillation method `{s}` (expected none, kl, cwd or cirkd)"))
    }
}

/// Axis along which the channel-wise loss normalizes each map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CwdAxis {
    /// One distribution per channel over spatial positions.
    Spatial,
    /// One distribution per position over channels.
    Channel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Entries per class in each memory queue.
    pub queue_size: usize,
    /// Anchor pixels sampled per image, and memory entries sampled per step.
    pub samples_per_step: usize,
    /// Softmax temperature of the similarity rows.
    pub relation_temperature: f64,
    pub cwd_axis: CwdAxis,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            queue_size: 64,
            samples_per_step: 32,
            relation_temperature: 0.1,
            cwd_axis: CwdAxis::Spatial,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<(), KdError> {
        if !(self.temperature > 0.0) {
            return Err(KdError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.relation_temperature > 0.0) {
            return Err(KdError::Config("relation temperature must be positive".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.1..=1.0).contains(&v) {
                return Err(KdError::Config(format!("{name} must lie in [0.1, 1], got {v}")));
            }
        }
        if self.queue_size == 0 || self.samples_per_step == 0 {
            return Err(KdError::Config("queue size and samples per step must be positive".into()));
        }
        Ok(())
    }
}

fn check_shapes(tape: &Tape, student: Var, teacher: &Tensor) -> Result<(), KdError> {
    let s = tape.value(student).shape();
    if s != teacher.shape() {
        return Err(KdError::ShapeMismatch { student: s.to_vec(), teacher: teacher.shape().to_vec() });
    }
    Ok(())
}

/// `T² · KL(softmax(teacher/T) || softmax(student/T))` along `axis`,
/// averaged over all other positions.
pub fn kd_kl(tape: &mut Tape, student: Var, teacher: &Tensor, axis: usize, t: f64) -> Result<Var, KdError> {
    check_shapes(tape, student, teacher)?;
    let target = tape.constant(teacher.clone());
    let kl = tape.kl_divergence(target, student, axis, t)?;
    let positions = teacher.numel() / teacher.shape()[axis];
    Ok(tape.scale(kl, t * t / positions as f64)?)
}

/// Channel-wise distillation of `[b, c, ...]` maps:
/// `(T²/C) Σ_c Σ_i p_T log(p_T / p_S)` per image, averaged over the batch.
///
/// With [`CwdAxis::Spatial`] each channel is a distribution over positions;
/// with [`CwdAxis::Channel`] each position is a distribution over channels,
/// and on a `1×1` map the loss equals [`kd_kl`] divided by `C`.
pub fn kd_cwd(tape: &mut Tape, student: Var, teacher: &Tensor, t: f64, axis: CwdAxis) -> Result<Var, KdError> {
    check_shapes(tape, student, teacher)?;
    let shape = teacher.shape();
    if shape.len() < 2 {
        return Err(KdError::ShapeMismatch { student: shape.to_vec(), teacher: shape.to_vec() });
    }
    let (b, c) = (shape[0], shape[1]);
    let positions: usize = shape[2..].iter().product();
    let flat = [b, c, positions];
    let s = tape.reshape(student, &flat)?;
    let target = tape.constant(teacher.reshape(&flat)?);
    let ax = match axis {
        CwdAxis::Spatial => 2,
        CwdAxis::Channel => 1,
    };
    let kl = tape.kl_divergence(target, s, ax, t)?;
    Ok(tape.scale(kl, t * t / (c * b) as f64)?)
}

/// Unit-norm per-pixel embeddings `[b·h·w, c]` of `[b, c, h, w]` maps.
pub fn pixel_embeddings(tape: &mut Tape, maps: Var) -> Result<Var, KdError> {
    let s = tape.value(maps).shape().to_vec();
    if s.len() != 4 {
        return Err(KdError::Tensor(TensorError::ShapeMismatch {
            op: "pixel_embeddings",
            detail: format!("expected [b, c, h, w], got {s:?}"),
        }));
    }
    let p = tape.permute(maps, &[0, 2, 3, 1])?;
    let r = tape.reshape(p, &[s[0] * s[2] * s[3], s[1]])?;
    Ok(tape.l2_normalize(r, 1e-12)?)
}

/// [`pixel_embeddings`] of a constant tensor.
pub fn pixel_embeddings_of(maps: &Tensor) -> Result<Tensor, KdError> {
    let mut tape = Tape::new();
    let m = tape.constant(maps.clone());
    let e = pixel_embeddings(&mut tape, m)?;
    Ok(tape.value(e).clone())
}

/// Mean row-wise `KL(softmax(tA·kTᵀ/τ) || softmax(sA·kSᵀ/τ))`.
fn relation_kl(
    tape: &mut Tape,
    s_anchor: Var,
    s_keys: Var,
    t_anchor: &Tensor,
    t_keys: &Tensor,
    tau: f64,
) -> Result<Var, KdError> {
    let sim_s = tape.matmul(s_anchor, s_keys, true)?;
    let mut t = Tape::new();
    let (ta, tk) = (t.constant(t_anchor.clone()), t.constant(t_keys.clone()));
    let sim_t = t.matmul(ta, tk, true)?;
    let target = tape.constant(t.value(sim_t).clone());
    let kl = tape.kl_divergence(target, sim_s, 1, tau)?;
    Ok(tape.scale(kl, 1.0 / t_anchor.shape()[0] as f64)?)
}

/// Cross-image pixel relations within a batch.
///
/// `student`/`teacher` hold `images` equal blocks of embedding rows. For
/// every ordered pair of distinct images the similarity rows of the first
/// image's pixels against the second's are compared; the result is the mean
/// over pairs of the mean row KL.
pub fn batch_p2p(tape: &mut Tape, student: Var, teacher: &Tensor, images: usize, tau: f64) -> Result<Var, KdError> {
    check_shapes(tape, student, teacher)?;
    if images < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let per = teacher.shape()[0] / images;
    let rows = |i: usize| (i * per..(i + 1) * per).collect::<Vec<_>>();
    let mut blocks_s = Vec::with_capacity(images);
    let mut blocks_t = Vec::with_capacity(images);
    for i in 0..images {
        blocks_s.push(tape.index_select(student, &rows(i))?);
        blocks_t.push(teacher.select(0, &rows(i))?);
    }
    let mut total: Option<Var> = None;
    for i in 0..images {
        for j in (0..images).filter(|&j| j != i) {
            let term = relation_kl(tape, blocks_s[i], blocks_s[j], &blocks_t[i], &blocks_t[j], tau)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let pairs = images * (images - 1);
    Ok(tape.scale(total.unwrap(), 1.0 / pairs as f64)?)
}

/// Relations of anchors against a fixed embedding bank.
pub fn memory_relation(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    bank: Option<&Tensor>,
    tau: f64,
) -> Result<Var, KdError> {
    check_shapes(tape, student, teacher)?;
    let Some(bank) = bank else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let keys = tape.constant(bank.clone());
    relation_kl(tape, student, keys, teacher, bank, tau)
}

/// Class-aware FIFO queues of teacher pixel and region embeddings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryQueue {
    pub capacity: usize,
    pub pixels: BTreeMap<usize, VecDeque<Vec<f64>>>,
    pub regions: BTreeMap<usize, VecDeque<Vec<f64>>>,
}

fn push_bounded(q: &mut BTreeMap<usize, VecDeque<Vec<f64>>>, cap: usize, class: usize, e: Vec<f64>) {
    let d = q.entry(class).or_default();
    d.push_back(e);
    while d.len() > cap {
        d.pop_front();
    }
}

fn sample_bank<R: Rng>(q: &BTreeMap<usize, VecDeque<Vec<f64>>>, n: usize, rng: &mut R) -> Option<Tensor> {
    let all: Vec<&Vec<f64>> = q.values().flatten().collect();
    if all.is_empty() {
        return None;
    }
    let pick: Vec<usize> = if all.len() <= n {
        (0..all.len()).collect()
    } else {
        let mut v = sample(rng, all.len(), n).into_vec();
        v.sort_unstable();
        v
    };
    let d = all[0].len();
    let data = pick.iter().flat_map(|&i| all[i].iter().copied()).collect();
    Some(Tensor::new(vec![pick.len(), d], data).expect("bank rows share a width"))
}

impl MemoryQueue {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, ..Default::default() }
    }

    pub fn push_pixel(&mut self, class: usize, e: Vec<f64>) {
        push_bounded(&mut self.pixels, self.capacity, class, e);
    }

    pub fn push_region(&mut self, class: usize, e: Vec<f64>) {
        push_bounded(&mut self.regions, self.capacity, class, e);
    }

    pub fn len(&self) -> usize {
        self.pixels.values().map(VecDeque::len).sum::<usize>() + self.regions.values().map(VecDeque::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel_bank<R: Rng>(&self, n: usize, rng: &mut R) -> Option<Tensor> {
        sample_bank(&self.pixels, n, rng)
    }

    pub fn region_bank<R: Rng>(&self, n: usize, rng: &mut R) -> Option<Tensor> {
        sample_bank(&self.regions, n, rng)
    }
}

/// The three weighted relational terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct CirkdTerms {
    pub batch_p2p: Var,
    pub memory_p2p: Var,
    pub memory_p2r: Var,
    pub total: Var,
}

/// Relational distillation of `[b, c, h, w]` output maps, using each
/// pixel's normalized logit vector as its embedding.
///
/// Anchors are `samples_per_step` pixels per image. The queues are read
/// before and updated after the loss is formed: sampled teacher pixels go to
/// the pixel queue under their label, and per-image class-mean teacher
/// embeddings go to the region queue.
pub fn kd_cirkd<R: Rng>(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    labels: &[usize],
    queue: &mut MemoryQueue,
    cfg: &KdConfig,
    rng: &mut R,
) -> Result<CirkdTerms, KdError> {
    check_shapes(tape, student, teacher)?;
    let shape = teacher.shape().to_vec();
    let (b, hw) = (shape[0], shape[2] * shape[3]);
    if labels.len() != b * hw {
        return Err(KdError::Labels(labels.len(), b * hw));
    }
    let s_emb = pixel_embeddings(tape, student)?;
    let t_emb = pixel_embeddings_of(teacher)?;

    let per = cfg.samples_per_step.min(hw);
    let mut rows = Vec::with_capacity(b * per);
    for i in 0..b {
        let mut idx = sample(rng, hw, per).into_vec();
        idx.sort_unstable();
        rows.extend(idx.into_iter().map(|p| i * hw + p));
    }
    let s_a = tape.index_select(s_emb, &rows)?;
    let t_a = t_emb.select(0, &rows)?;
    let tau = cfg.relation_temperature;

    let bp = batch_p2p(tape, s_a, &t_a, b, tau)?;
    let pixel_bank = queue.pixel_bank(cfg.samples_per_step, rng);
    let mp = memory_relation(tape, s_a, &t_a, pixel_bank.as_ref(), tau)?;
    let region_bank = queue.region_bank(cfg.samples_per_step, rng);
    let mr = memory_relation(tape, s_a, &t_a, region_bank.as_ref(), tau)?;

    let a = tape.scale(bp, cfg.alpha)?;
    let m = tape.scale(mp, cfg.beta)?;
    let r = tape.scale(mr, cfg.gamma)?;
    let am = tape.add(a, m)?;
    let total = tape.add(am, r)?;

    let d = shape[1];
    for (k, &row) in rows.iter().enumerate() {
        queue.push_pixel(labels[row], t_a.data()[k * d..(k + 1) * d].to_vec());
    }
    for i in 0..b {
        let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for p in 0..hw {
            let row = i * hw + p;
            let acc = sums.entry(labels[row]).or_insert_with(|| vec![0.0; d]);
            for (a, v) in acc.iter_mut().zip(&t_emb.data()[row * d..(row + 1) * d]) {
                *a += v;
            }
        }
        for (class, v) in sums {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            queue.push_region(class, v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(CirkdTerms { batch_p2p: bp, memory_p2p: mp, memory_p2r: mr, total })
}

/// Distillation term for `method`, or `None` when distillation is off.
///
/// `student` is `[b, c]` logits or `[b, c, h, w]` maps; class probabilities
/// live on axis 1. The relational method adds its terms to the KL term.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss<R: Rng>(
    tape: &mut Tape,
    method: KdMethod,
    student: Var,
    teacher: &Tensor,
    labels: &[usize],
    queue: &mut MemoryQueue,
    cfg: &KdConfig,
    rng: &mut R,
) -> Result<Option<Var>, KdError> {
    Ok(match method {
        KdMethod::None => None,
        KdMethod::Kl => Some(kd_kl(tape, student, teacher, 1, cfg.temperature)?),
        KdMethod::Cwd => Some(kd_cwd(tape, student, teacher, cfg.temperature, cfg.cwd_axis)?),
        KdMethod::Cirkd => {
            let kl = kd_kl(tape, student, teacher, 1, cfg.temperature)?;
            let rel = kd_cirkd(tape, student, teacher, labels, queue, cfg, rng)?;
            Some(tape.add(kl, rel.total)?)
        }
    })
}
