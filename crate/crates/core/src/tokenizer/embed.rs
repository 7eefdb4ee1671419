use rand::Rng;

use super::{BiDirEncoderTable, Token};
use crate::data::{Modality, JOINT_COUNT};
use crate::error::{Error, Result};
use crate::model::params::{dense, normal, ParamId, ParamStore};
use crate::tensor::{Graph, Var};

/// Row offset of each modality in the learned element table.
fn element_offset(m: Modality) -> usize {
    match m {
        Modality::Traj => 0,
        Modality::Box3d => 1,
        Modality::Box2d => 3,
        Modality::Pose3d => 5,
        Modality::Pose2d => 5 + JOINT_COUNT,
    }
}

const ELEMENT_ROWS: usize = 5 + 2 * JOINT_COUNT;

/// Learned token-embedding parameters.
///
/// A data-carrying token of modality `c` becomes `x·W_c + b_c`; masked and
/// missing entries use the shared mask embedding; future queries use their
/// query embeddings. Each vector then receives the learned (modality,
/// element) embedding and the fixed bidirectional encoding of its slot.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub dim: usize,
    projections: Vec<(Modality, ParamId, ParamId)>,
    element: ParamId,
    mask: ParamId,
    traj_query: ParamId,
    pose_query: Option<ParamId>,
    pub table: BiDirEncoderTable,
}

impl EmbeddingParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        dim: usize,
        inputs: &[Modality],
        pose_queries: bool,
        capacity: usize,
    ) -> Result<Self> {
        let table = BiDirEncoderTable::new(dim, capacity)?;
        let mut projections = Vec::new();
        for m in Modality::ALL {
            if inputs.contains(&m) {
                let w = store.add(format!("embed.{m}.w"), dense(rng, m.features(), dim, 1.0));
                let b = store.add(format!("embed.{m}.b"), normal(rng, &[dim], 0.0));
                projections.push((m, w, b));
            }
        }
        let element = store.add("embed.element", normal(rng, &[ELEMENT_ROWS, dim], 0.1));
        let mask = store.add("embed.mask", normal(rng, &[1, dim], 0.1));
        let traj_query = store.add("embed.query.traj", normal(rng, &[1, dim], 0.1));
        let pose_query = pose_queries.then(|| store.add("embed.query.pose", normal(rng, &[JOINT_COUNT, dim], 0.1)));
        Ok(Self {
            dim,
            projections,
            element,
            mask,
            traj_query,
            pose_query,
            table,
        })
    }

    pub fn has_projection(&self, m: Modality) -> bool {
        self.projections.iter().any(|p| p.0 == m)
    }

    pub fn has_pose_queries(&self) -> bool {
        self.pose_query.is_some()
    }

    /// `[tokens.len() × D]` token vectors in token order.
    pub fn embed(&self, g: &Graph, store: &ParamStore, tokens: &[Token]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::contract("cannot embed an empty token list"));
        }
        // Build each category as one block, then reorder to token order.
        let mut parts = Vec::new();
        let mut order: Vec<usize> = Vec::with_capacity(tokens.len());
        for &(m, w, b) in &self.projections {
            let idx: Vec<usize> = (0..tokens.len())
                .filter(|&i| tokens[i].modality == m && tokens[i].carries_data())
                .collect();
            if idx.is_empty() {
                continue;
            }
            let f = m.features();
            let x = crate::tensor::Tensor::new(
                vec![idx.len(), f],
                idx.iter().flat_map(|&i| tokens[i].coords[..f].to_vec()).collect(),
            )?;
            let xv = g.constant(x);
            let proj = g.matmul(xv, store.var(g, w))?;
            parts.push(g.add_row(proj, store.var(g, b))?);
            order.extend(idx);
        }
        if let Some(t) = tokens.iter().find(|t| t.carries_data() && !self.has_projection(t.modality)) {
            return Err(Error::Config(format!("no projection registered for modality {}", t.modality)));
        }
        let masked: Vec<usize> = (0..tokens.len())
            .filter(|&i| !tokens[i].is_future_query && !tokens[i].carries_data())
            .collect();
        if !masked.is_empty() {
            parts.push(g.gather_rows(store.var(g, self.mask), &vec![0; masked.len()])?);
            order.extend(masked);
        }
        let tq: Vec<usize> = (0..tokens.len())
            .filter(|&i| tokens[i].is_future_query && tokens[i].modality == Modality::Traj)
            .collect();
        if !tq.is_empty() {
            parts.push(g.gather_rows(store.var(g, self.traj_query), &vec![0; tq.len()])?);
            order.extend(tq);
        }
        let pq: Vec<usize> = (0..tokens.len())
            .filter(|&i| tokens[i].is_future_query && tokens[i].modality != Modality::Traj)
            .collect();
        if !pq.is_empty() {
            let id = self
                .pose_query
                .ok_or_else(|| Error::Config("model has no pose queries".into()))?;
            let joints: Vec<usize> = pq.iter().map(|&i| tokens[i].element).collect();
            parts.push(g.gather_rows(store.var(g, id), &joints)?);
            order.extend(pq);
        }

        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let mut inverse = vec![0; tokens.len()];
        for (pos, &tok) in order.iter().enumerate() {
            inverse[tok] = pos;
        }
        let content = g.gather_rows(stacked, &inverse)?;
        let elem_idx: Vec<usize> = tokens.iter().map(|t| element_offset(t.modality) + t.element).collect();
        let elem = g.gather_rows(store.var(g, self.element), &elem_idx)?;
        let pos = g.constant(self.table.rows(tokens.iter().map(|t| t.slot))?);
        let x = g.add(content, elem)?;
        g.add(x, pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Fps, ModalityTensor};
    use crate::tokenizer::{append_future_queries, project, upsample_pad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(inputs: &[Modality]) -> (ParamStore, EmbeddingParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = EmbeddingParams::init(&mut store, &mut rng, 8, inputs, true, 500).unwrap();
        (store, e)
    }

    #[test]
    fn queries_are_shared_parameters() {
        let (store, e) = setup(&[Modality::Traj]);
        let mut toks = Vec::new();
        append_future_queries(&mut toks, 3, 10, true, false);
        let g = Graph::new();
        let v = g.value(e.embed(&g, &store, &toks).unwrap());
        let g2 = Graph::new();
        let v2 = g2.value(e.embed(&g2, &store, &toks).unwrap());
        assert_eq!(v, v2);
        // before encoding, rows differ only by the slot encoding
        let table = e.table;
        for (r, t) in toks.iter().enumerate() {
            let enc = table.encode(t.slot).unwrap();
            let base: Vec<f64> = v.row(r).iter().zip(&enc).map(|(a, b)| a - b).collect();
            let first: Vec<f64> = v.row(0).iter().zip(table.encode(toks[0].slot).unwrap()).map(|(a, b)| a - b).collect();
            for (x, y) in base.iter().zip(&first) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unregistered_modality_is_config_error() {
        let (store, e) = setup(&[Modality::Traj]);
        let pose = ModalityTensor::new(Modality::Box2d, 1, vec![1.0; 4], vec![true; 2]).unwrap();
        let toks = project(&pose, 1).unwrap();
        let g = Graph::new();
        assert!(matches!(e.embed(&g, &store, &toks), Err(Error::Config(_))));
    }

    #[test]
    fn padding_uses_mask_embedding() {
        let (store, e) = setup(&[Modality::Traj]);
        let t = ModalityTensor::new(Modality::Traj, 2, vec![1.0, 2.0, 3.0, 4.0], vec![true; 2]).unwrap();
        let toks = upsample_pad(&project(&t, 2).unwrap(), Fps::new(25.0).unwrap(), Fps::new(50.0).unwrap()).unwrap();
        assert_eq!(toks.len(), 4);
        let g = Graph::new();
        let v = g.value(e.embed(&g, &store, &toks).unwrap());
        assert_eq!(v.shape(), &[4, 8]);
        assert!(v.is_finite());
    }
}
