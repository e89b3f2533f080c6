use super::forward::{decode, encode};
use super::{GateVector, Parameters};
use crate::data::{BOS, EOS};
use crate::error::Result;

/// Argmax decoding until `EOS` or `max_len` emitted tokens. The returned
/// sequence excludes `EOS`. Ties go to the lowest token id.
pub fn greedy_decode(params: &Parameters, source: &[u32], gates: &GateVector, max_len: usize) -> Result<Vec<u32>> {
    gates.check(params.config())?;
    let max_len = max_len.min(params.config().max_len.saturating_sub(1));
    let mut out = Vec::new();
    if max_len == 0 {
        return Ok(out);
    }
    let encoded = encode(params, &gates.enc, source);
    let mut input = vec![BOS];
    while out.len() < max_len {
        let decoded = decode(params, &gates.dec, encoded.memory.view(), &input);
        let last = decoded.logits.row(decoded.logits.nrows() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        let tok = best as u32;
        if tok == EOS {
            break;
        }
        out.push(tok);
        input.push(tok);
    }
    Ok(out)
}
