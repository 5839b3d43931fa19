//! Spatial pooling over a precomputed partition and the matching unpooling
//! strategies.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::graph::Graph;
use crate::partition::Coarsening;
use crate::tape::{Reduce, Var};
use crate::tensor::Tensor;

/// Number of per-node structural statistics used by weighted deconvolution.
pub const STRUCTURE_FEATURES: usize = 3;

/// Number of interleaved batch elements in a signal with `rows` rows on a
/// graph of `nodes` nodes.
pub fn batch_size(rows: usize, nodes: usize) -> Option<usize> {
    (nodes > 0 && rows % nodes == 0 && rows > 0).then_some(rows / nodes)
}

/// Repeats a node map for `batch` interleaved elements: row `i·B + b` maps
/// to `map[i]·B + b`.
pub fn expand_index(map: &[usize], batch: usize) -> Vec<usize> {
    if batch == 1 {
        return map.to_vec();
    }
    map.iter()
        .flat_map(|&s| (0..batch).map(move |b| s * batch + b))
        .collect()
}

/// Pools an `N×C` signal to `N′×C`, one row per super node. Batched
/// `N·B`-row signals pool each element separately.
pub fn g_pooling<'t>(x: &Var<'t>, level: &Coarsening, mode: Reduce) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    let Some(batch) = batch_size(rows, level.fine_count()) else {
        return Err(dim_err!(
            "g_pooling: signal has {rows} rows, partition expects {} nodes",
            level.fine_count()
        ));
    };
    x.segment_reduce(
        &expand_index(&level.assignment, batch),
        level.coarse_count() * batch,
        mode,
    )
}

/// Applies the same pooling at every time step.
pub fn st_pool_spatial<'t>(seq: &[Var<'t>], level: &Coarsening, mode: Reduce) -> Result<Vec<Var<'t>>> {
    seq.iter().map(|x| g_pooling(x, level, mode)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UnpoolMode {
    #[default]
    DirectCopy,
    OrderedDeconv,
    WeightedDeconv,
}

impl UnpoolMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::DirectCopy => "direct_copy",
            Self::OrderedDeconv => "ordered_deconv",
            Self::WeightedDeconv => "weighted_deconv",
        }
    }

    pub const ALL: [UnpoolMode; 3] = [Self::DirectCopy, Self::OrderedDeconv, Self::WeightedDeconv];
}

impl FromStr for UnpoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct_copy" | "direct-copy" => Ok(Self::DirectCopy),
            "ordered_deconv" | "ordered-deconv" => Ok(Self::OrderedDeconv),
            "weighted_deconv" | "weighted-deconv" => Ok(Self::WeightedDeconv),
            other => Err(Error::Usage(format!("unknown unpool strategy '{other}'"))),
        }
    }
}

/// Unpooling strategy with its parameters bound to a tape.
#[derive(Clone, Debug)]
pub enum UnpoolStrategy<'t> {
    DirectCopy,
    /// One `C_in×C_out` matrix per slot.
    OrderedDeconv { slots: Vec<Var<'t>> },
    /// Slot matrices plus a `(C_out + 3)×C_out` map over the deconvolved
    /// features and the structural statistics.
    WeightedDeconv { slots: Vec<Var<'t>>, embed: Var<'t> },
}

/// Where each fine node sits inside its super node.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpoolLayout {
    pub super_of: Vec<usize>,
    /// Position of the node within its super node by descending fine-graph
    /// strength, ties to the lower id.
    pub slot: Vec<usize>,
    pub coarse_count: usize,
    pub max_slots: usize,
    /// Per fine node: `[degree / max degree, incident weight sum, member count]`.
    pub structure: Tensor,
}

impl UnpoolLayout {
    pub fn new(level: &Coarsening, fine: &Graph) -> Result<Self> {
        let n = level.fine_count();
        if fine.node_count() != n {
            return Err(dim_err!(
                "unpool layout: fine graph has {} nodes, partition {n}",
                fine.node_count()
            ));
        }
        let mut slot = alloc::vec![0; n];
        for group in &level.members {
            let mut ordered = group.clone();
            ordered.sort_by(|&a, &b| {
                fine.strength(b)
                    .total_cmp(&fine.strength(a))
                    .then(a.cmp(&b))
            });
            for (r, &v) in ordered.iter().enumerate() {
                slot[v] = r;
            }
        }
        let max_degree = (0..n).map(|i| fine.degree(i)).max().unwrap_or(0);
        let mut structure = Tensor::zeros(&[n, STRUCTURE_FEATURES]);
        for i in 0..n {
            let norm_degree = if max_degree > 0 {
                fine.degree(i) as f64 / max_degree as f64
            } else {
                0.0
            };
            structure.set(i, 0, norm_degree);
            structure.set(i, 1, fine.strength(i));
            structure.set(i, 2, level.members[level.assignment[i]].len() as f64);
        }
        Ok(Self {
            super_of: level.assignment.clone(),
            slot,
            coarse_count: level.coarse_count(),
            max_slots: level.max_members(),
            structure,
        })
    }

    pub fn fine_count(&self) -> usize {
        self.super_of.len()
    }
}

/// Restores an `N′×C` coarse signal onto the `N` fine nodes.
pub fn unpool<'t>(x: &Var<'t>, layout: &UnpoolLayout, strategy: &UnpoolStrategy<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let batch = match batch_size(shape[0], layout.coarse_count) {
        Some(b) if shape.len() == 2 => b,
        _ => {
            return Err(dim_err!(
                "unpool: signal {shape:?} does not match {} super nodes",
                layout.coarse_count
            ))
        }
    };
    match strategy {
        UnpoolStrategy::DirectCopy => x.gather_rows(&expand_index(&layout.super_of, batch)),
        UnpoolStrategy::OrderedDeconv { slots } => ordered(x, layout, slots, batch),
        UnpoolStrategy::WeightedDeconv { slots, embed } => {
            let deconv = ordered(x, layout, slots, batch)?;
            let structure = if batch == 1 {
                layout.structure.clone()
            } else {
                let rows: Vec<usize> = (0..layout.fine_count() * batch).map(|r| r / batch).collect();
                gather(&layout.structure, &rows)
            };
            let stats = x.tape().constant(structure);
            deconv.concat_channels(&stats)?.matmul(embed)
        }
    }
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), c], data).expect("non-empty gather")
}

fn ordered<'t>(x: &Var<'t>, layout: &UnpoolLayout, slots: &[Var<'t>], batch: usize) -> Result<Var<'t>> {
    if slots.len() < layout.max_slots {
        return Err(Error::Usage(format!(
            "ordered deconvolution needs {} slot weights, got {}",
            layout.max_slots,
            slots.len()
        )));
    }
    let per_slot = slots[..layout.max_slots]
        .iter()
        .map(|w| x.matmul(w))
        .collect::<Result<Vec<_>>>()?;
    let stacked = Var::stack_rows(&per_slot)?;
    let block = layout.coarse_count * batch;
    let index: Vec<usize> = layout
        .super_of
        .iter()
        .zip(&layout.slot)
        .flat_map(|(&s, &r)| (0..batch).map(move |b| r * block + s * batch + b))
        .collect();
    stacked.gather_rows(&index)
}

/// Per-step channel concatenation; encoder features come last. `None` stands
/// for a zero-width encoder signal.
pub fn skip_concat<'t>(upsampled: &[Var<'t>], encoder: Option<&[Var<'t>]>) -> Result<Vec<Var<'t>>> {
    let Some(encoder) = encoder else {
        return Ok(upsampled.to_vec());
    };
    if upsampled.len() != encoder.len() {
        return Err(dim_err!(
            "skip_concat: {} upsampled steps vs {} encoder steps",
            upsampled.len(),
            encoder.len()
        ));
    }
    upsampled
        .iter()
        .zip(encoder)
        .map(|(u, e)| u.concat_channels(e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{multilevel_partition, Coarsening};
    use crate::tape::Tape;
    use alloc::vec;

    fn pair_level() -> (Graph, Coarsening) {
        let g = Graph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let pm = multilevel_partition(&g, 1).unwrap();
        (g, pm.levels[0].clone())
    }

    #[test]
    fn pooling_examples() {
        let (g, level) = pair_level();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0], [3.0]]).unwrap());
        assert_eq!(g_pooling(&x, &level, Reduce::Max).unwrap().to_tensor().data(), &[3.0]);
        let y = tape.constant(Tensor::from_rows(&[[2.0], [4.0]]).unwrap());
        assert_eq!(g_pooling(&y, &level, Reduce::Mean).unwrap().to_tensor().data(), &[3.0]);

        let id = Coarsening::identity(&g);
        assert_eq!(g_pooling(&x, &id, Reduce::Max).unwrap().to_tensor(), x.to_tensor());
        let wrong = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(g_pooling(&wrong, &level, Reduce::Max).is_err());
    }

    #[test]
    fn direct_copy_and_degenerate_deconv() {
        let (g, level) = pair_level();
        let layout = UnpoolLayout::new(&level, &g).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[5.0]]).unwrap());
        let copied = unpool(&x, &layout, &UnpoolStrategy::DirectCopy).unwrap();
        assert_eq!(copied.to_tensor().data(), &[5.0, 5.0]);

        let eye = tape.constant(Tensor::identity(1));
        let ordered = UnpoolStrategy::OrderedDeconv { slots: vec![eye, eye] };
        assert_eq!(unpool(&x, &layout, &ordered).unwrap().to_tensor(), copied.to_tensor());
        let short = UnpoolStrategy::OrderedDeconv { slots: vec![eye] };
        assert!(matches!(unpool(&x, &layout, &short), Err(Error::Usage(_))));
    }

    #[test]
    fn slots_follow_strength_order() {
        // Node 2 is heavier than node 3 inside the pair {2,3}.
        let g = Graph::from_edges(4, &[(0, 1, 1.0), (1, 2, 0.5), (2, 3, 4.0), (0, 2, 3.0)]).unwrap();
        let level = crate::partition::coarsen(&g, &crate::partition::path_grow_select(&g)).unwrap();
        let layout = UnpoolLayout::new(&level, &g).unwrap();
        for group in &level.members {
            if let [a, b] = group[..] {
                let (hi, lo) = if g.strength(a) >= g.strength(b) { (a, b) } else { (b, a) };
                assert_eq!((layout.slot[hi], layout.slot[lo]), (0, 1));
            }
        }
        assert_eq!(layout.structure.shape(), [4, STRUCTURE_FEATURES]);
    }

    #[test]
    fn unknown_strategy_name() {
        assert!(matches!("bilinear".parse::<UnpoolMode>(), Err(Error::Usage(_))));
        for m in UnpoolMode::ALL {
            assert_eq!(m.name().parse::<UnpoolMode>().unwrap(), m);
        }
    }

    #[test]
    fn skip_concat_cases() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::from_rows(&[[1.0]]).unwrap());
        let e = tape.constant(Tensor::from_rows(&[[2.0]]).unwrap());
        let out = skip_concat(&[u], Some(&[e])).unwrap();
        assert_eq!(out[0].to_tensor().data(), &[1.0, 2.0]);
        let same = skip_concat(&[u], None).unwrap();
        assert_eq!(same[0].to_tensor(), u.to_tensor());
        assert!(skip_concat(&[u, u], Some(&[e])).is_err());
    }
}
