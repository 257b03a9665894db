use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use crate::tokenizer::ScaleSchedule;

/// `[n, n]` visibility: query token `i` sees key `j` iff `scale(j) <= scale(i)`.
pub fn block_causal_mask(schedule: &ScaleSchedule, n: usize) -> Vec<bool> {
    let scales = &schedule.scale_of_tokens()[..n];
    let mut mask = Vec::with_capacity(n * n);
    for &qi in scales {
        mask.extend(scales.iter().map(|&kj| kj <= qi));
    }
    mask
}

/// Scaled dot-product attention split over `heads` column groups.
pub(crate) fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, mask: &[bool]) -> Result<Var> {
    let e = g.value(q).cols();
    if e % heads != 0 || g.value(k).cols() != e || g.value(v).cols() != e {
        return Err(Error::Model(format!(
            "attention over q {:?}, k {:?}, v {:?} with {heads} heads",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let hd = e / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let s = g.matmul_bt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let p = g.masked_softmax(s, mask)?;
        outs.push(g.matmul(p, vh)?);
    }
    if heads == 1 {
        return Ok(outs[0]);
    }
    g.concat_cols(&outs)
}
