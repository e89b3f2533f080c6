use std::cell::Cell;

use ndarray::{Array2, ArrayView2};

use super::ops::{self, AttnCache, FfnCache, NormCache};
use super::params::{DecLayerIds, EncLayerIds, Gradients, Parameters};
use super::GateVector;
use crate::data::{Batch, Example};
use crate::error::{Error, Result};

struct EncLayerCache {
    input: Array2<f64>,
    norm1: NormCache,
    normed1: Array2<f64>,
    attn: AttnCache,
    norm2: NormCache,
    normed2: Array2<f64>,
    ffn: FfnCache,
}

struct DecLayerCache {
    input: Array2<f64>,
    norm1: NormCache,
    normed1: Array2<f64>,
    self_attn: AttnCache,
    norm2: NormCache,
    normed2: Array2<f64>,
    cross_attn: AttnCache,
    norm3: NormCache,
    normed3: Array2<f64>,
    ffn: FfnCache,
}

/// Encoder side of one sequence: layer caches (`None` for gated-off layers)
/// plus the final normalization.
pub(crate) struct Encoded {
    layers: Vec<Option<EncLayerCache>>,
    final_norm: NormCache,
    pub memory: Array2<f64>,
}

pub(crate) struct Decoded {
    layers: Vec<Option<DecLayerCache>>,
    final_in: Array2<f64>,
    final_norm: NormCache,
    normed: Array2<f64>,
    pub logits: Array2<f64>,
}

struct SequenceCache {
    source: Vec<u32>,
    decoder_input: Vec<u32>,
    labels: Vec<u32>,
    probs: Array2<f64>,
    encoded: Encoded,
    decoded: Decoded,
}

/// Result of a forward pass over a batch: the mean per-token loss and
/// everything the backward pass needs.
pub struct Forward {
    pub loss: f64,
    pub token_count: usize,
    gates: GateVector,
    sequences: Vec<SequenceCache>,
}

fn embed(p: &Parameters, table: usize, pos: usize, tokens: &[u32]) -> Array2<f64> {
    let emb = p.t(table);
    let pos = p.t(pos);
    let mut x = Array2::zeros((tokens.len(), emb.ncols()));
    for (i, (&tok, mut row)) in tokens.iter().zip(x.rows_mut()).enumerate() {
        row.assign(&emb.row(tok as usize));
        row += &pos.row(i);
    }
    x
}

fn embed_back(g: &mut Gradients, table: usize, pos: usize, tokens: &[u32], dx: ArrayView2<f64>) {
    {
        let demb = g.t_mut(table);
        for (&tok, row) in tokens.iter().zip(dx.rows()) {
            let mut target = demb.row_mut(tok as usize);
            target += &row;
        }
    }
    let dpos = g.t_mut(pos);
    for (i, row) in dx.rows().into_iter().enumerate() {
        let mut target = dpos.row_mut(i);
        target += &row;
    }
}

fn check_tokens(p: &Parameters, tokens: &[u32]) -> Result<()> {
    let c = p.config();
    if tokens.len() > c.max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_len: c.max_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab: c.vocab_size,
        });
    }
    Ok(())
}

fn enc_layer(p: &Parameters, ids: EncLayerIds, heads: usize, x: Array2<f64>) -> (Array2<f64>, EncLayerCache) {
    let (normed1, norm1) = ops::layer_norm(p, ids.norm1, x.view());
    let (attn_out, attn) = ops::attention(p, ids.attn, heads, normed1.view(), normed1.view(), false);
    let mid = &x + &attn_out;
    let (normed2, norm2) = ops::layer_norm(p, ids.norm2, mid.view());
    let (ffn_out, ffn) = ops::ffn(p, ids.ffn, normed2.view());
    let out = &mid + &ffn_out;
    (
        out,
        EncLayerCache {
            input: x,
            norm1,
            normed1,
            attn,
            norm2,
            normed2,
            ffn,
        },
    )
}

fn enc_layer_back(
    p: &Parameters,
    g: &mut Gradients,
    ids: EncLayerIds,
    heads: usize,
    c: &EncLayerCache,
    dout: Array2<f64>,
) -> Array2<f64> {
    let dnormed2 = ops::ffn_back(p, g, ids.ffn, c.normed2.view(), &c.ffn, dout.view());
    let dmid = dout + ops::layer_norm_back(p, g, ids.norm2, &c.norm2, dnormed2.view());
    let (dq, dkv) = ops::attention_back(
        p,
        g,
        ids.attn,
        heads,
        c.normed1.view(),
        c.normed1.view(),
        &c.attn,
        dmid.view(),
    );
    let dnormed1 = dq + dkv;
    debug_assert_eq!(dnormed1.dim(), c.input.dim());
    dmid + ops::layer_norm_back(p, g, ids.norm1, &c.norm1, dnormed1.view())
}

fn dec_layer(
    p: &Parameters,
    ids: DecLayerIds,
    heads: usize,
    x: Array2<f64>,
    memory: ArrayView2<f64>,
) -> (Array2<f64>, DecLayerCache) {
    let (normed1, norm1) = ops::layer_norm(p, ids.norm1, x.view());
    let (sa, self_attn) = ops::attention(p, ids.self_attn, heads, normed1.view(), normed1.view(), true);
    let after_self = &x + &sa;
    let (normed2, norm2) = ops::layer_norm(p, ids.norm2, after_self.view());
    let (ca, cross_attn) = ops::attention(p, ids.cross_attn, heads, normed2.view(), memory, false);
    let after_cross = &after_self + &ca;
    let (normed3, norm3) = ops::layer_norm(p, ids.norm3, after_cross.view());
    let (ff, ffn) = ops::ffn(p, ids.ffn, normed3.view());
    let out = &after_cross + &ff;
    (
        out,
        DecLayerCache {
            input: x,
            norm1,
            normed1,
            self_attn,
            norm2,
            normed2,
            cross_attn,
            norm3,
            normed3,
            ffn,
        },
    )
}

/// Returns the input gradient; adds the memory gradient into `dmemory`.
#[allow(clippy::too_many_arguments)]
fn dec_layer_back(
    p: &Parameters,
    g: &mut Gradients,
    ids: DecLayerIds,
    heads: usize,
    c: &DecLayerCache,
    memory: ArrayView2<f64>,
    dout: Array2<f64>,
    dmemory: &mut Array2<f64>,
) -> Array2<f64> {
    let dnormed3 = ops::ffn_back(p, g, ids.ffn, c.normed3.view(), &c.ffn, dout.view());
    let dafter_cross = dout + ops::layer_norm_back(p, g, ids.norm3, &c.norm3, dnormed3.view());
    let (dnormed2, dmem) = ops::attention_back(
        p,
        g,
        ids.cross_attn,
        heads,
        c.normed2.view(),
        memory,
        &c.cross_attn,
        dafter_cross.view(),
    );
    *dmemory += &dmem;
    let dafter_self = dafter_cross + ops::layer_norm_back(p, g, ids.norm2, &c.norm2, dnormed2.view());
    let (dq, dkv) = ops::attention_back(
        p,
        g,
        ids.self_attn,
        heads,
        c.normed1.view(),
        c.normed1.view(),
        &c.self_attn,
        dafter_self.view(),
    );
    let dnormed1 = dq + dkv;
    debug_assert_eq!(dnormed1.dim(), c.input.dim());
    dafter_self + ops::layer_norm_back(p, g, ids.norm1, &c.norm1, dnormed1.view())
}

pub(crate) fn encode(p: &Parameters, gates: &[bool], source: &[u32]) -> Encoded {
    let l = &p.layout;
    let heads = p.config().heads;
    let mut x = embed(p, l.src_embed, l.src_pos, source);
    let mut layers = Vec::with_capacity(gates.len());
    for (&ids, &on) in l.enc.iter().zip(gates) {
        if on {
            let (out, cache) = enc_layer(p, ids, heads, x);
            x = out;
            layers.push(Some(cache));
        } else {
            layers.push(None);
        }
    }
    let (memory, final_norm) = ops::layer_norm(p, l.enc_norm, x.view());
    Encoded {
        layers,
        final_norm,
        memory,
    }
}

pub(crate) fn decode(p: &Parameters, gates: &[bool], memory: ArrayView2<f64>, input: &[u32]) -> Decoded {
    let l = &p.layout;
    let heads = p.config().heads;
    let mut y = embed(p, l.tgt_embed, l.tgt_pos, input);
    let mut layers = Vec::with_capacity(gates.len());
    for (&ids, &on) in l.dec.iter().zip(gates) {
        if on {
            let (out, cache) = dec_layer(p, ids, heads, y, memory);
            y = out;
            layers.push(Some(cache));
        } else {
            layers.push(None);
        }
    }
    let (normed, final_norm) = ops::layer_norm(p, l.dec_norm, y.view());
    let logits = ops::linear(p, l.out, normed.view());
    Decoded {
        layers,
        final_in: y,
        final_norm,
        normed,
        logits,
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

fn forward_sequence(p: &Parameters, gates: &GateVector, ex: &Example) -> Result<(f64, SequenceCache)> {
    let decoder_input = ex.decoder_input();
    let labels = ex.decoder_labels();
    check_tokens(p, &ex.source)?;
    check_tokens(p, &decoder_input)?;
    check_tokens(p, &labels)?;
    let encoded = encode(p, &gates.enc, &ex.source);
    let decoded = decode(p, &gates.dec, encoded.memory.view(), &decoder_input);
    let probs = softmax_rows(&decoded.logits);
    let loss: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs[[i, t as usize]].ln())
        .sum();
    Ok((
        loss,
        SequenceCache {
            source: ex.source.clone(),
            decoder_input,
            labels,
            probs,
            encoded,
            decoded,
        },
    ))
}

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`forward_loss`] calls made on the current thread so far.
/// Training cost can be measured as the difference across a run.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(Cell::get)
}

/// Mean cross-entropy per target token over the batch. A gated-off layer
/// is skipped, so it maps its residual stream to itself exactly.
pub fn forward_loss(params: &Parameters, batch: &Batch, gates: &GateVector) -> Result<Forward> {
    gates.check(params.config())?;
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
    let token_count = batch.token_count();
    let mut total = 0.0;
    let mut sequences = Vec::with_capacity(batch.len());
    for ex in &batch.examples {
        let (loss, cache) = forward_sequence(params, gates, ex)?;
        total += loss;
        sequences.push(cache);
    }
    let loss = if token_count == 0 {
        0.0
    } else {
        total / token_count as f64
    };
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: batch.id });
    }
    Ok(Forward {
        loss,
        token_count,
        gates: gates.clone(),
        sequences,
    })
}

/// Gradient of [`Forward::loss`] with respect to every parameter.
/// Parameters of gated-off layers get exactly zero.
pub fn backward(params: &Parameters, fwd: &Forward) -> Result<Gradients> {
    let mut g = Gradients::zeros_like(params);
    if fwd.token_count == 0 {
        return Ok(g);
    }
    let l = &params.layout;
    let heads = params.config().heads;
    let scale = 1.0 / fwd.token_count as f64;
    for seq in &fwd.sequences {
        let mut dlogits = seq.probs.clone();
        for (i, &t) in seq.labels.iter().enumerate() {
            dlogits[[i, t as usize]] -= 1.0;
        }
        dlogits.mapv_inplace(|v| v * scale);

        let dec = &seq.decoded;
        let dnormed = ops::linear_back(params, &mut g, l.out, dec.normed.view(), dlogits.view());
        let mut dy = ops::layer_norm_back(params, &mut g, l.dec_norm, &dec.final_norm, dnormed.view());
        debug_assert_eq!(dy.dim(), dec.final_in.dim());
        let memory = seq.encoded.memory.view();
        let mut dmemory = Array2::zeros(memory.raw_dim());
        for (&ids, cache) in l.dec.iter().zip(&dec.layers).rev() {
            if let Some(c) = cache {
                dy = dec_layer_back(params, &mut g, ids, heads, c, memory, dy, &mut dmemory);
            }
        }
        embed_back(&mut g, l.tgt_embed, l.tgt_pos, &seq.decoder_input, dy.view());

        let enc = &seq.encoded;
        let mut dx = ops::layer_norm_back(params, &mut g, l.enc_norm, &enc.final_norm, dmemory.view());
        for (&ids, cache) in l.enc.iter().zip(&enc.layers).rev() {
            if let Some(c) = cache {
                dx = enc_layer_back(params, &mut g, ids, heads, c, dx);
            }
        }
        embed_back(&mut g, l.src_embed, l.src_pos, &seq.source, dx.view());
    }
    debug_assert!(fwd.gates.enc.len() == l.enc.len());
    g.check_finite(params)?;
    Ok(g)
}

pub fn loss_and_grad(params: &Parameters, batch: &Batch, gates: &GateVector) -> Result<(f64, Gradients)> {
    let fwd = forward_loss(params, batch, gates)?;
    let g = backward(params, &fwd)?;
    Ok((fwd.loss, g))
}

/// Encoder output rows for inspection in tests.
#[cfg(test)]
pub(crate) fn encoder_states(p: &Parameters, gates: &[bool], source: &[u32]) -> Vec<Array2<f64>> {
    let l = &p.layout;
    let mut x = embed(p, l.src_embed, l.src_pos, source);
    let mut states = vec![x.clone()];
    for (&ids, &on) in l.enc.iter().zip(gates) {
        if on {
            x = enc_layer(p, ids, p.config().heads, x).0;
        }
        states.push(x.clone());
    }
    states
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            enc_layers: 3,
            dec_layers: 2,
            width: 8,
            heads: 2,
            ffn_width: 12,
            vocab_size: 10,
            max_len: 8,
        }
    }

    fn batch() -> Batch {
        Batch::new(
            0,
            vec![
                Example::new(vec![3, 4, 5], vec![3, 4, 5]),
                Example::new(vec![9, 7], vec![7, 9]),
            ],
        )
    }

    #[test]
    fn gated_off_layer_is_bitwise_identity() {
        let p = init_params(&small(), 1).unwrap();
        let states = encoder_states(&p, &[true, false, true], &[3, 4, 5, 6]);
        assert_eq!(states[2], states[1]);
        assert_ne!(states[3], states[2]);
    }

    #[test]
    fn masked_layers_get_zero_gradient() {
        let p = init_params(&small(), 2).unwrap();
        let gates = GateVector {
            enc: vec![true, false, true],
            dec: vec![false, true],
        };
        let (_, g) = loss_and_grad(&p, &batch(), &gates).unwrap();
        for (name, t) in p.names().iter().zip(g.tensors()) {
            let dead = name.starts_with("encoder.layer2.") || name.starts_with("decoder.layer1.");
            if dead {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            } else if name.ends_with("weight") && !name.contains("embed") {
                assert!(t.iter().any(|&v| v != 0.0), "{name} has no gradient");
            }
        }
    }

    #[test]
    fn all_gates_off_leaves_embeddings_and_output() {
        let c = small();
        let p = init_params(&c, 3).unwrap();
        let f = forward_loss(&p, &batch(), &GateVector::all_off(&c)).unwrap();
        assert!(f.loss.is_finite() && f.loss > 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = small();
        let p = init_params(&c, 0).unwrap();
        let gates = GateVector::all_on(&c);
        let oov = Batch::new(0, vec![Example::new(vec![10], vec![3])]);
        assert!(matches!(
            forward_loss(&p, &oov, &gates),
            Err(Error::TokenOutOfRange { .. })
        ));
        let long = Batch::new(0, vec![Example::new(vec![3; 9], vec![3])]);
        assert!(matches!(
            forward_loss(&p, &long, &gates),
            Err(Error::SequenceTooLong { .. })
        ));
        let wrong = GateVector {
            enc: vec![true],
            dec: vec![true, true],
        };
        assert!(forward_loss(&p, &batch(), &wrong).is_err());
    }
}
