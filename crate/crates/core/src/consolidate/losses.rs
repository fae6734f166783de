//! Teacher-student mismatch losses over response-token positions.
//!
//! All distribution losses take one teacher row and one student row per
//! scored position (probability vectors over the vocabulary) plus a position
//! mask, and return the mean over unmasked positions. A fully masked input is
//! 0 by convention. Gradient helpers return the derivative with respect to
//! the *student logits* (softmax Jacobian folded in), which is what the
//! backward pass consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Fkl,
    Rkl,
    Akl,
    Dpkd,
    Mse,
    Seqkd,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fkl" => Ok(LossKind::Fkl),
            "rkl" => Ok(LossKind::Rkl),
            "akl" => Ok(LossKind::Akl),
            "dpkd" => Ok(LossKind::Dpkd),
            "mse" => Ok(LossKind::Mse),
            "seqkd" => Ok(LossKind::Seqkd),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Fkl => "fkl",
            LossKind::Rkl => "rkl",
            LossKind::Akl => "akl",
            LossKind::Dpkd => "dpkd",
            LossKind::Mse => "mse",
            LossKind::Seqkd => "seqkd",
        }
    }
}

const TINY: f64 = 1e-300;

fn check_rows(teacher: &[Vec<f64>], student: &[Vec<f64>], mask: &[bool]) -> Result<()> {
    if teacher.len() != student.len() || teacher.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {} / student {} / mask {} positions",
            teacher.len(),
            student.len(),
            mask.len()
        )));
    }
    for (t, (p, q)) in teacher.iter().zip(student.iter()).enumerate() {
        if p.len() != q.len() {
            return Err(Error::ShapeMismatch(format!(
                "position {t}: teacher row {} vs student row {}",
                p.len(),
                q.len()
            )));
        }
    }
    Ok(())
}

fn fkl_pos(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in 0..p.len() {
        if p[v] > 0.0 {
            acc += p[v] * (p[v].max(TINY).ln() - q[v].max(TINY).ln());
        }
    }
    acc
}

fn rkl_pos(p: &[f64], q: &[f64]) -> f64 {
    fkl_pos(q, p)
}

/// KL(teacher ‖ student), mean over unmasked positions.
pub fn loss_fkl(teacher: &[Vec<f64>], student: &[Vec<f64>], mask: &[bool]) -> Result<f64> {
    check_rows(teacher, student, mask)?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in 0..teacher.len() {
        if mask[t] {
            acc += fkl_pos(&teacher[t], &student[t]);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// KL(student ‖ teacher), mean over unmasked positions.
pub fn loss_rkl(teacher: &[Vec<f64>], student: &[Vec<f64>], mask: &[bool]) -> Result<f64> {
    check_rows(teacher, student, mask)?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in 0..teacher.len() {
        if mask[t] {
            acc += rkl_pos(&teacher[t], &student[t]);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// Head/tail split of the vocabulary for one position: indices sorted by
/// teacher probability (descending, ties by index) until the cumulative mass
/// reaches `head_mass`.
fn head_set(p: &[f64], head_mass: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut in_head = vec![false; p.len()];
    let mut cum = 0.0;
    for &v in &order {
        in_head[v] = true;
        cum += p[v];
        if cum >= head_mass {
            break;
        }
    }
    in_head
}

/// Per-position blend weight `w = g_head / (g_head + g_tail)` from the
/// absolute probability gaps inside/outside the teacher head set.
fn akl_weight(p: &[f64], q: &[f64], in_head: &[bool]) -> (f64, f64, f64) {
    let mut g_head = 0.0;
    let mut g_tail = 0.0;
    for v in 0..p.len() {
        let gap = (p[v] - q[v]).abs();
        if in_head[v] {
            g_head += gap;
        } else {
            g_tail += gap;
        }
    }
    let w = if g_head + g_tail == 0.0 {
        0.5
    } else {
        g_head / (g_head + g_tail)
    };
    (w, g_head, g_tail)
}

/// Adaptive blend of forward and reverse KL, weighted per position by where
/// the teacher-student probability gap concentrates.
pub fn loss_akl(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    mask: &[bool],
    head_mass: f64,
) -> Result<f64> {
    check_rows(teacher, student, mask)?;
    if !(0.0..1.0).contains(&head_mass) || head_mass == 0.0 {
        return Err(Error::Config(format!("head_mass {head_mass} not in (0, 1)")));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in 0..teacher.len() {
        if !mask[t] {
            continue;
        }
        let p = &teacher[t];
        let q = &student[t];
        let in_head = head_set(p, head_mass);
        let (w, _, _) = akl_weight(p, q, &in_head);
        acc += w * fkl_pos(p, q) + (1.0 - w) * rkl_pos(p, q);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// Length-normalized sequence-level reverse KL: summed per-position reverse
/// KL divided by the unmasked-position count.
pub fn loss_dpkd(teacher: &[Vec<f64>], student: &[Vec<f64>], mask: &[bool]) -> Result<f64> {
    check_rows(teacher, student, mask)?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in 0..teacher.len() {
        if mask[t] {
            acc += rkl_pos(&teacher[t], &student[t]);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// Mean squared hidden-state difference over unmasked positions and
/// dimensions.
pub fn loss_mse(
    teacher_hidden: &[Vec<f64>],
    student_hidden: &[Vec<f64>],
    mask: &[bool],
) -> Result<f64> {
    if teacher_hidden.len() != student_hidden.len() || teacher_hidden.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {} / student {} / mask {} positions",
            teacher_hidden.len(),
            student_hidden.len(),
            mask.len()
        )));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in 0..teacher_hidden.len() {
        if !mask[t] {
            continue;
        }
        let (ht, hs) = (&teacher_hidden[t], &student_hidden[t]);
        if ht.len() != hs.len() {
            return Err(Error::ShapeMismatch(format!(
                "position {t}: hidden dims {} vs {}",
                ht.len(),
                hs.len()
            )));
        }
        for i in 0..ht.len() {
            let dlt = hs[i] - ht[i];
            acc += dlt * dlt;
        }
        n += ht.len();
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// Hard-label cross-entropy on teacher-sampled tokens: mean negative student
/// log-probability over unmasked positions.
pub fn loss_seqkd(student_logprobs: &[f64], mask: &[bool]) -> Result<f64> {
    if student_logprobs.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "logprobs {} vs mask {}",
            student_logprobs.len(),
            mask.len()
        )));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in 0..student_logprobs.len() {
        if mask[t] {
            acc += -student_logprobs[t];
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

// ---------------------------------------------------------------------------
// Gradients with respect to student logits / hidden states
// ---------------------------------------------------------------------------

/// d(loss_fkl)/d(student logits): `(q - p) / N` per unmasked position.
pub fn grad_logits_fkl(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    mask: &[bool],
) -> Result<Vec<Vec<f64>>> {
    check_rows(teacher, student, mask)?;
    let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
    Ok((0..teacher.len())
        .map(|t| {
            let v = teacher[t].len();
            if !mask[t] {
                return vec![0.0; v];
            }
            (0..v)
                .map(|i| (student[t][i] - teacher[t][i]) / n)
                .collect()
        })
        .collect())
}

fn rkl_grad_row(p: &[f64], q: &[f64], n: f64) -> Vec<f64> {
    let r = rkl_pos(p, q);
    (0..p.len())
        .map(|v| {
            let a = q[v].max(TINY).ln() - p[v].max(TINY).ln();
            q[v] * (a - r) / n
        })
        .collect()
}

/// d(loss_rkl)/d(student logits).
pub fn grad_logits_rkl(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    mask: &[bool],
) -> Result<Vec<Vec<f64>>> {
    check_rows(teacher, student, mask)?;
    let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
    Ok((0..teacher.len())
        .map(|t| {
            if !mask[t] {
                return vec![0.0; teacher[t].len()];
            }
            rkl_grad_row(&teacher[t], &student[t], n)
        })
        .collect())
}

/// d(loss_dpkd)/d(student logits); the per-token form coincides with the
/// reverse-KL gradient under mean normalization.
pub fn grad_logits_dpkd(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    mask: &[bool],
) -> Result<Vec<Vec<f64>>> {
    grad_logits_rkl(teacher, student, mask)
}

/// d(loss_akl)/d(student logits), including the dependence of the blend
/// weight on the student distribution. The head set depends only on the
/// teacher, so it is constant under differentiation.
pub fn grad_logits_akl(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    mask: &[bool],
    head_mass: f64,
) -> Result<Vec<Vec<f64>>> {
    check_rows(teacher, student, mask)?;
    let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let mut out = Vec::with_capacity(teacher.len());
    for t in 0..teacher.len() {
        let p = &teacher[t];
        let q = &student[t];
        let vlen = p.len();
        if !mask[t] {
            out.push(vec![0.0; vlen]);
            continue;
        }
        let in_head = head_set(p, head_mass);
        let (w, g_head, g_tail) = akl_weight(p, q, &in_head);
        let f = fkl_pos(p, q);
        let r = rkl_pos(p, q);
        let denom = g_head + g_tail;

        // dL/dq_v, then fold through the softmax Jacobian.
        let mut dldq = vec![0.0; vlen];
        for v in 0..vlen {
            let df = -p[v] / q[v].max(TINY);
            let dr = q[v].max(TINY).ln() - p[v].max(TINY).ln() + 1.0;
            let mut g = w * df + (1.0 - w) * dr;
            if denom > 0.0 {
                let s = (q[v] - p[v]).signum();
                let (dgh, dgt) = if in_head[v] { (s, 0.0) } else { (0.0, s) };
                let dw = (dgh * g_tail - g_head * dgt) / (denom * denom);
                g += (f - r) * dw;
            }
            dldq[v] = g;
        }
        let inner: f64 = (0..vlen).map(|v| q[v] * dldq[v]).sum();
        out.push((0..vlen).map(|v| q[v] * (dldq[v] - inner) / n).collect());
    }
    Ok(out)
}

/// d(loss_mse)/d(student hidden): `2 (h_s - h_t) / (N * d)` per unmasked
/// position.
pub fn grad_hidden_mse(
    teacher_hidden: &[Vec<f64>],
    student_hidden: &[Vec<f64>],
    mask: &[bool],
) -> Result<Vec<Vec<f64>>> {
    loss_mse(teacher_hidden, student_hidden, mask)?; // shape validation
    let mut n = 0usize;
    for t in 0..mask.len() {
        if mask[t] {
            n += teacher_hidden[t].len();
        }
    }
    let n = n.max(1) as f64;
    Ok((0..teacher_hidden.len())
        .map(|t| {
            let d = teacher_hidden[t].len();
            if !mask[t] {
                return vec![0.0; d];
            }
            (0..d)
                .map(|i| 2.0 * (student_hidden[t][i] - teacher_hidden[t][i]) / n)
                .collect()
        })
        .collect())
}

/// d(loss_seqkd)/d(student logits): `(q - onehot(target)) / N`.
pub fn grad_logits_seqkd(
    student: &[Vec<f64>],
    targets: &[u32],
    mask: &[bool],
) -> Result<Vec<Vec<f64>>> {
    if student.len() != targets.len() || student.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "student {} / targets {} / mask {}",
            student.len(),
            targets.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
    Ok((0..student.len())
        .map(|t| {
            let v = student[t].len();
            if !mask[t] {
                return vec![0.0; v];
            }
            (0..v)
                .map(|i| {
                    let one = if i == targets[t] as usize { 1.0 } else { 0.0 };
                    (student[t][i] - one) / n
                })
                .collect()
        })
        .collect())
}
