//! Scene–object fusion: multi-head attention with a single scene-derived
//! query over the frame's object embeddings, returning the fused feature and
//! one attention score per object.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::object_encoder::ObjectEmbedding;
use crate::params::{xavier_uniform, zeros_vec, ParamId, ParamStore};
use crate::scene::SceneState;

/// Fused feature plus per-object attention scores.
///
/// For `N >= 1` objects the scores are a probability vector: each in `[0, 1]`
/// and summing to 1 (mean over per-head softmax rows).
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: Array1<f64>,
    pub scores: Vec<f64>,
}

pub struct MhaParams {
    pub num_heads: usize,
    pub fused_dim: usize,
    pub object_dim: usize,
    pub scene_dim: usize,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    /// Projection used for frames with zero detections.
    we: ParamId,
    be: ParamId,
}

impl MhaParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        scene_dim: usize,
        object_dim: usize,
        fused_dim: usize,
        num_heads: usize,
    ) -> Self {
        assert!(fused_dim % num_heads == 0, "fused_dim must divide into heads");
        Self {
            num_heads,
            fused_dim,
            object_dim,
            scene_dim,
            wq: store.add("mha.wq", xavier_uniform(rng, fused_dim, scene_dim)),
            bq: store.add("mha.bq", zeros_vec(fused_dim)),
            wk: store.add("mha.wk", xavier_uniform(rng, fused_dim, object_dim)),
            bk: store.add("mha.bk", zeros_vec(fused_dim)),
            wv: store.add("mha.wv", xavier_uniform(rng, fused_dim, object_dim)),
            bv: store.add("mha.bv", zeros_vec(fused_dim)),
            wo: store.add("mha.wo", xavier_uniform(rng, fused_dim, fused_dim)),
            bo: store.add("mha.bo", zeros_vec(fused_dim)),
            we: store.add("mha.we", xavier_uniform(rng, fused_dim, scene_dim)),
            be: store.add("mha.be", zeros_vec(fused_dim)),
        }
    }

    /// Tape-level fusion. Returns `(fused (D_f,), scores (N,))`.
    pub fn fuse_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        scene_hidden: Var,
        objects: &[Var],
    ) -> Result<(Var, Var)> {
        if objects.is_empty() {
            return Err(Error::EmptyObjectSet);
        }
        if tape.value(scene_hidden).len() != self.scene_dim {
            return Err(Error::InvalidShape(format!(
                "scene hidden has length {}, expected {}",
                tape.value(scene_hidden).len(),
                self.scene_dim
            )));
        }
        for o in objects {
            if tape.value(*o).len() != self.object_dim {
                return Err(Error::InvalidShape(format!(
                    "object embedding has length {}, expected {}",
                    tape.value(*o).len(),
                    self.object_dim
                )));
            }
        }
        let head_dim = self.fused_dim / self.num_heads;

        let wq = tape.param(store, self.wq);
        let bq = tape.param(store, self.bq);
        let q = tape.affine(wq, bq, scene_hidden);

        let wk = tape.param(store, self.wk);
        let bk = tape.param(store, self.bk);
        let wv = tape.param(store, self.wv);
        let bv = tape.param(store, self.bv);
        let keys: Vec<Var> = objects.iter().map(|o| tape.affine(wk, bk, *o)).collect();
        let values: Vec<Var> = objects.iter().map(|o| tape.affine(wv, bv, *o)).collect();

        let mut contexts = Vec::with_capacity(self.num_heads);
        let mut head_weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let start = h * head_dim;
            let qh = tape.slice(q, start, head_dim);
            let k_rows: Vec<Var> = keys.iter().map(|k| tape.slice(*k, start, head_dim)).collect();
            let v_rows: Vec<Var> = values.iter().map(|v| tape.slice(*v, start, head_dim)).collect();
            let kh = tape.stack_rows(&k_rows);
            let vh = tape.stack_rows(&v_rows);
            let logits = tape.matvec(kh, qh);
            let logits = tape.scale(logits, 1.0 / (head_dim as f64).sqrt());
            let attn = tape.softmax(logits);
            head_weights.push(attn);
            contexts.push(tape.tmatvec(vh, attn));
        }
        let ctx = tape.concat(&contexts);
        let wo = tape.param(store, self.wo);
        let bo = tape.param(store, self.bo);
        let projected = tape.affine(wo, bo, ctx);
        let fused = tape.add(projected, q);

        let summed = tape.add_n(&head_weights);
        let scores = tape.scale(summed, 1.0 / self.num_heads as f64);
        Ok((fused, scores))
    }

    /// Tape-level projection for frames with zero detections.
    pub fn fuse_empty_t(&self, tape: &mut Tape, store: &ParamStore, scene_hidden: Var) -> Result<Var> {
        if tape.value(scene_hidden).len() != self.scene_dim {
            return Err(Error::InvalidShape(format!(
                "scene hidden has length {}, expected {}",
                tape.value(scene_hidden).len(),
                self.scene_dim
            )));
        }
        let we = tape.param(store, self.we);
        let be = tape.param(store, self.be);
        Ok(tape.affine(we, be, scene_hidden))
    }

    /// Value-level fusion of a scene state with `N >= 1` object embeddings.
    pub fn fuse(
        &self,
        store: &ParamStore,
        scene: &SceneState,
        objects: &[ObjectEmbedding],
    ) -> Result<FusionOutput> {
        let mut tape = Tape::new();
        let h = tape.constant(scene.hidden.clone().into_dyn());
        let obj_vars: Vec<Var> = objects
            .iter()
            .map(|o| tape.constant(o.values.clone().into_dyn()))
            .collect();
        let (fused, scores) = self.fuse_t(&mut tape, store, h, &obj_vars)?;
        Ok(FusionOutput {
            fused: tape
                .value(fused)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap(),
            scores: tape.value(scores).iter().cloned().collect(),
        })
    }

    /// Value-level zero-detection fallback; scores are empty.
    pub fn fuse_empty(&self, store: &ParamStore, scene: &SceneState) -> Result<FusionOutput> {
        let mut tape = Tape::new();
        let h = tape.constant(scene.hidden.clone().into_dyn());
        let fused = self.fuse_empty_t(&mut tape, store, h)?;
        Ok(FusionOutput {
            fused: tape
                .value(fused)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap(),
            scores: Vec::new(),
        })
    }
}
