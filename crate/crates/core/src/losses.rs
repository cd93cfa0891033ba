//! Training objective for the student: label-smoothed NLL plus two hint
//! terms taken from a frozen teacher.
//!
//! * `L_hid` charges a penalty for every pair of student positions whose hidden
//!   states are similar (`d_st ≥ γ_st`) while the teacher's are not
//!   (`d_tr ≤ γ_tr`), averaged over pairs and layers.
//! * `L_align` is the mean per-head `KL(teacher ‖ student)` of encoder-decoder
//!   attention rows.
//!
//! Teacher quantities always enter as constants. Active-region membership in
//! `L_hid` is decided on values and carries no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::special;
use crate::tensor::{Graph, NdArray, Var};

/// Upper clamp for `d_st` inside `−log(1 − d_st)`.
pub const SIMILARITY_CLAMP: f64 = 1.0 - 1e-7;
/// Floor applied to student attention probabilities inside the KL.
pub const KL_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Penalty {
    /// `−log(1 − d_st)`
    #[default]
    NegLog,
    /// `exp(d_st)`
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HintConfig {
    pub gamma_st: f64,
    pub gamma_tr: f64,
    pub lambda: f64,
    pub mu: f64,
    pub label_smoothing: f64,
    pub penalty: Penalty,
}

impl Default for HintConfig {
    fn default() -> Self {
        Self {
            gamma_st: 0.1,
            gamma_tr: 0.9,
            lambda: 5.0,
            mu: 1.0,
            label_smoothing: 0.1,
            penalty: Penalty::NegLog,
        }
    }
}

impl HintConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = -1.0..=1.0;
        if !unit.contains(&self.gamma_st) || !unit.contains(&self.gamma_tr) {
            return Err(Error::config("similarity thresholds must lie in [-1, 1]"));
        }
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return Err(Error::config("hint weights must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label smoothing must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Whether the pair `(d_st, d_tr)` is penalized.
    pub fn is_active(&self, d_st: f64, d_tr: f64) -> bool {
        d_st >= self.gamma_st && d_tr <= self.gamma_tr
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub hid: f64,
    pub align: f64,
    pub total: f64,
}

/// Cosine similarity clamped to `[−1, 1]`. The flag is set when either vector
/// has zero norm, in which case the similarity is defined as 0.
pub fn cosine_flagged(u: &[f64], v: &[f64]) -> (f64, bool) {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return (0.0, true);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    ((dot / (nu * nv)).clamp(-1.0, 1.0), false)
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    cosine_flagged(u, v).0
}

/// Pairwise penalty for one `(d_st, d_tr)` pair.
pub fn phi(d_st: f64, d_tr: f64, cfg: &HintConfig) -> f64 {
    if !cfg.is_active(d_st, d_tr) {
        return 0.0;
    }
    match cfg.penalty {
        Penalty::NegLog => -(1.0 - d_st.min(SIMILARITY_CLAMP)).ln(),
        Penalty::Exp => d_st.exp(),
    }
}

fn cosine_matrix(h: &NdArray) -> NdArray {
    let t = h.rows();
    let mut out = NdArray::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            out.set(&[i, j], cosine(h.row(i), h.row(j)));
        }
    }
    out
}

/// `L_hid` recorded on `g`. `student` holds one `T × d` node per layer;
/// `teacher` is `N × T × d`.
pub fn hid_loss(g: &mut Graph, student: &[Var], teacher: &NdArray, cfg: &HintConfig) -> Result<Var> {
    let layers = student.len();
    if layers == 0 || teacher.rank() != 3 || teacher.shape()[0] != layers {
        return Err(Error::Contract("hidden-state hints need matching layer counts".into()));
    }
    let t = g.value(student[0]).shape()[0];
    if teacher.shape()[1] != t {
        return Err(Error::Contract(format!(
            "student has {t} positions, teacher {}",
            teacher.shape()[1]
        )));
    }
    if t < 2 {
        return Ok(g.constant(NdArray::scalar(0.0))?);
    }
    let mut terms = Vec::with_capacity(layers);
    for (l, &h) in student.iter().enumerate() {
        let d_tr = cosine_matrix(&teacher.slice_first(l));
        let d_st = g.cosine_rows(h)?;
        let mut mask = NdArray::zeros(&[t, t]);
        let sv = g.value(d_st);
        for s in 0..t {
            for u in s + 1..t {
                if cfg.is_active(sv.at(&[s, u]).clamp(-1.0, 1.0), d_tr.at(&[s, u])) {
                    mask.set(&[s, u], 1.0);
                }
            }
        }
        let penalty = match cfg.penalty {
            Penalty::NegLog => {
                let c = g.clamp(d_st, -1.0, SIMILARITY_CLAMP)?;
                let one_minus = g.scale(c, -1.0)?;
                let one_minus = g.add_scalar(one_minus, 1.0)?;
                let lg = g.log(one_minus)?;
                g.neg(lg)?
            }
            Penalty::Exp => g.exp(d_st)?,
        };
        let m = g.constant(mask)?;
        let masked = g.mul(penalty, m)?;
        terms.push(g.sum(masked)?);
    }
    let mut total = terms[0];
    for &v in &terms[1..] {
        total = g.add(total, v)?;
    }
    let norm = 2.0 / ((t - 1) as f64 * t as f64 * layers as f64);
    Ok(g.scale(total, norm)?)
}

/// `L_align` recorded on `g`. `student[l][h]` is a `T_y × T_x` node; `teacher`
/// is `N × H × T_y × T_x`.
pub fn align_loss(g: &mut Graph, student: &[Vec<Var>], teacher: &NdArray) -> Result<Var> {
    let layers = student.len();
    let heads = student.first().map_or(0, Vec::len);
    if layers == 0 || heads == 0 || teacher.rank() != 4 || teacher.shape()[..2] != [layers, heads] {
        return Err(Error::Contract("alignment hints need matching layer and head counts".into()));
    }
    let t_y = teacher.shape()[2];
    let mut cross_terms = Vec::with_capacity(layers * heads);
    let mut entropy_part = 0.0;
    for (l, row) in student.iter().enumerate() {
        for (h, &s) in row.iter().enumerate() {
            let target = teacher.slice_first(l).slice_first(h);
            if g.value(s).shape() != target.shape() {
                return Err(Error::Contract(format!(
                    "attention shapes differ: {:?} vs {:?}",
                    g.value(s).shape(),
                    target.shape()
                )));
            }
            entropy_part += target.data().iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            let floored = g.clamp(s, KL_FLOOR, f64::INFINITY)?;
            let log_s = g.log(floored)?;
            let tv = g.constant(target)?;
            let weighted = g.mul(tv, log_s)?;
            cross_terms.push(g.sum(weighted)?);
        }
    }
    let mut cross = cross_terms[0];
    for &v in &cross_terms[1..] {
        cross = g.add(cross, v)?;
    }
    // Σ t·ln t − Σ t·ln s
    let kl = g.neg(cross)?;
    let kl = g.add_scalar(kl, entropy_part)?;
    Ok(g.scale(kl, 1.0 / (t_y * layers * heads) as f64)?)
}

/// Mean label-smoothed cross-entropy over non-pad positions.
pub fn nll_loss(g: &mut Graph, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let lv = g.value(logits);
    let (t, v) = (lv.shape()[0], lv.shape()[1]);
    if targets.len() != t {
        return Err(Error::Contract(format!("{} targets for {t} logit rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::input(format!("target id {bad} outside vocabulary of {v}")));
    }
    let count = targets.iter().filter(|&&y| y != special::PAD).count();
    if count == 0 {
        return Err(Error::input("target consists only of padding"));
    }
    let dist = smoothed_targets(targets, v, smoothing);
    let logp = g.log_softmax(logits)?;
    let q = g.constant(dist)?;
    let prod = g.mul(q, logp)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, -1.0 / count as f64)?)
}

/// `(1−ε)·onehot(y) + ε/V` per row; pad rows are all zero.
pub fn smoothed_targets(targets: &[usize], vocab: usize, smoothing: f64) -> NdArray {
    let mut dist = NdArray::zeros(&[targets.len(), vocab]);
    for (t, &y) in targets.iter().enumerate() {
        if y == special::PAD {
            continue;
        }
        let row = dist.row_mut(t);
        row.iter_mut().for_each(|p| *p = smoothing / vocab as f64);
        row[y] += 1.0 - smoothing;
    }
    dist
}

/// Mean squared difference between student and teacher hidden states.
/// Only used as a negative control.
pub fn l2_hidden_loss(g: &mut Graph, student: &[Var], teacher: &NdArray) -> Result<Var> {
    let mut terms = Vec::with_capacity(student.len());
    for (l, &h) in student.iter().enumerate() {
        let tv = g.constant(teacher.slice_first(l))?;
        let diff = g.sub(h, tv)?;
        let sq = g.mul(diff, diff)?;
        terms.push(g.mean(sq)?);
    }
    let mut total = terms[0];
    for &v in &terms[1..] {
        total = g.add(total, v)?;
    }
    Ok(g.scale(total, 1.0 / student.len() as f64)?)
}

fn split_layers(g: &mut Graph, hidden: &NdArray) -> Result<Vec<Var>> {
    (0..hidden.shape()[0])
        .map(|l| Ok(g.constant(hidden.slice_first(l))?))
        .collect()
}

/// `L_hid` on plain arrays, both `N × T × d`.
pub fn loss_hid(student: &NdArray, teacher: &NdArray, cfg: &HintConfig) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::Contract("student and teacher hidden shapes differ".into()));
    }
    let mut g = Graph::new();
    let layers = split_layers(&mut g, student)?;
    let v = hid_loss(&mut g, &layers, teacher, cfg)?;
    Ok(g.value(v).item())
}

/// `L_align` on plain arrays, both `N × H × T_y × T_x`.
pub fn loss_align(student: &NdArray, teacher: &NdArray) -> Result<f64> {
    if student.shape() != teacher.shape() || student.rank() != 4 {
        return Err(Error::Contract("student and teacher attention shapes differ".into()));
    }
    let mut g = Graph::new();
    let mut vars = Vec::new();
    for l in 0..student.shape()[0] {
        let layer = student.slice_first(l);
        let heads = (0..student.shape()[1])
            .map(|h| g.constant(layer.slice_first(h)))
            .collect::<Result<Vec<_>, _>>()?;
        vars.push(heads);
    }
    let v = align_loss(&mut g, &vars, teacher)?;
    Ok(g.value(v).item())
}

/// Label-smoothed NLL on plain logits `T × V`.
pub fn loss_nll(logits: &NdArray, targets: &[usize], smoothing: f64) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone())?;
    let v = nll_loss(&mut g, l, targets, smoothing)?;
    Ok(g.value(v).item())
}

/// `nll + λ·hid + μ·align`.
pub fn loss_total(nll: f64, hid: f64, align: f64, cfg: &HintConfig) -> Result<LossBreakdown> {
    let b = LossBreakdown {
        nll,
        hid,
        align,
        total: nll + cfg.lambda * hid + cfg.mu * align,
    };
    if [b.nll, b.hid, b.align, b.total].iter().all(|v| v.is_finite()) {
        Ok(b)
    } else {
        Err(Error::Training(crate::train::TrainError::NonFiniteLoss { step: 0, breakdown: b }))
    }
}
