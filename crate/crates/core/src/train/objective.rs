//! Loss graphs for the distillation and next-token objectives.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::input::TokenSequence;
use crate::model::Session;
use crate::tensor::Real;

use super::teacher::TeacherBundle;

const COS_EPS: f64 = 1e-8;

/// Handles to the two halves of the distillation loss.
#[derive(Debug, Clone, Copy)]
pub struct DistillTerms {
    pub total: Var,
    pub image: Option<Var>,
    pub text: Option<Var>,
}

fn neg_mean_cos<F: Real>(g: &mut Graph<F>, student: Var, teacher: Var, what: &str) -> Result<Var> {
    let (ns, nt) = (g.value(student).rows(), g.value(teacher).rows());
    if ns != nt {
        return Err(Error::Alignment(format!("{what}: {ns} student rows against {nt} teacher rows")));
    }
    let cos = g.cosine_rows(student, teacher, F::lit(COS_EPS))?;
    let m = g.mean(cos)?;
    g.scale(m, -F::one())
}

/// Negative mean cosine over image rows plus negative mean cosine over text rows.
/// An absent pair contributes nothing.
pub fn distill_loss<F: Real>(
    g: &mut Graph<F>,
    image: Option<(Var, Var)>,
    text: Option<(Var, Var)>,
) -> Result<DistillTerms> {
    let image = image.map(|(s, t)| neg_mean_cos(g, s, t, "image tokens")).transpose()?;
    let text = text.map(|(s, t)| neg_mean_cos(g, s, t, "text tokens")).transpose()?;
    let total = match (image, text) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::Alignment("no tokens to distill".into())),
    };
    Ok(DistillTerms { total, image, text })
}

/// Distillation loss of one sequence against frozen teacher features.
pub fn distill_objective<F: Real>(
    s: &mut Session<'_, F>,
    teachers: &TeacherBundle<F>,
    seq: &TokenSequence,
) -> Result<DistillTerms> {
    let x = s.holistic_embed(seq)?;
    let image = match &seq.image {
        Some(block) => {
            let rows: Vec<usize> = block.range().collect();
            let student = s.graph.gather_rows(x, &rows)?;
            let z = s.graph.constant(teachers.image_features(&block.patches)?);
            Some((student, z))
        }
        None => None,
    };
    let positions = seq.text_positions();
    let text = if positions.is_empty() {
        None
    } else {
        let student = s.graph.gather_rows(x, &positions)?;
        let z = s.graph.constant(teachers.text_features(&seq.text_ids())?);
        Some((student, z))
    };
    distill_loss(&mut s.graph, image, text)
}

/// Mean over a batch of per-sample scalar losses.
pub fn batch_mean<F: Real>(g: &mut Graph<F>, losses: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = losses.split_first() else {
        return Err(Error::DegenerateBatch);
    };
    let mut acc = first;
    for &l in rest {
        acc = g.add(acc, l)?;
    }
    g.scale(acc, F::lit(1.0 / losses.len() as f64))
}
