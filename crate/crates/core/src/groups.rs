//! Weight groups over a conv layer's im2col weight matrix.
//!
//! A row group is one filter (all `C*H*W` weights of output channel `i`); a
//! column group is one shape position `(c, ky, kx)` across all `N` filters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor4D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupType {
    Row,
    Column,
}

impl std::fmt::Display for GroupType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupType::Row => "row",
            GroupType::Column => "column",
        })
    }
}

impl std::str::FromStr for GroupType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" | "filter" => Ok(GroupType::Row),
            "column" | "col" | "shape" => Ok(GroupType::Column),
            other => Err(Error::config("group_type", format!("unknown group type `{other}`"))),
        }
    }
}

/// Disjoint, exhaustive cover of a layer's weights by groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    layer_id: usize,
    group_type: GroupType,
    dims: [usize; 4],
    groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn group_type(&self) -> GroupType {
        self.group_type
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// Group count `G`.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Flat weight indices of group `g`.
    pub fn group(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn group_size(&self, g: usize) -> usize {
        self.groups[g].len()
    }

    pub fn weight_count(&self) -> usize {
        self.dims.iter().product()
    }

    fn check<T: Real>(&self, weights: &Tensor4D<T>) -> Result<()> {
        if weights.dims() != self.dims {
            return Err(Error::shape(
                format!("layer {}", self.layer_id),
                format!("partition built for {:?}, weights are {:?}", self.dims, weights.dims()),
            ));
        }
        Ok(())
    }
}

/// Builds the row or column partition of a weight tensor.
///
/// Row `i` is filter `i`; column `j` is im2col column `j`.
pub fn partition<T: Real>(layer_id: usize, weights: &Tensor4D<T>, group_type: GroupType) -> GroupPartition {
    partition_dims(layer_id, weights.dims(), group_type)
}

pub fn partition_dims(layer_id: usize, dims: [usize; 4], group_type: GroupType) -> GroupPartition {
    let rows = dims[0];
    let cols = dims[1] * dims[2] * dims[3];
    let groups = match group_type {
        GroupType::Row => (0..rows).map(|i| (i * cols..(i + 1) * cols).collect()).collect(),
        GroupType::Column => (0..cols).map(|j| (0..rows).map(|i| i * cols + j).collect()).collect(),
    };
    GroupPartition { layer_id, group_type, dims, groups }
}

/// `sum |w|` per group, accumulated in f64.
pub fn group_l1_norms<T: Real>(weights: &Tensor4D<T>, partition: &GroupPartition) -> Result<Vec<f64>> {
    partition.check(weights)?;
    let data = weights.data();
    Ok(partition.groups.iter().map(|g| g.iter().map(|&i| data[i].as_f64().abs()).sum()).collect())
}

/// Group magnitude used by the removal threshold: L1 norm divided by group size.
pub fn mean_abs(l1_norm: f64, group_size: usize) -> f64 {
    if group_size == 0 {
        0.0
    } else {
        l1_norm / group_size as f64
    }
}

/// Ascending ranks: the smallest norm gets rank 0. Ties go to the lower group index.
pub fn rank_ascending(norms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; norms.len()];
    for (rank, g) in order.into_iter().enumerate() {
        ranks[g] = rank;
    }
    ranks
}

/// Per-group pruned flags for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMask {
    pruned: Vec<bool>,
}

impl GroupMask {
    pub fn new(groups: usize) -> Self {
        Self { pruned: vec![false; groups] }
    }

    pub fn from_flags(pruned: Vec<bool>) -> Self {
        Self { pruned }
    }

    pub fn len(&self) -> usize {
        self.pruned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pruned.is_empty()
    }

    pub fn prune(&mut self, g: usize) {
        self.pruned[g] = true;
    }

    pub fn is_pruned(&self, g: usize) -> bool {
        self.pruned[g]
    }

    pub fn flags(&self) -> &[bool] {
        &self.pruned
    }

    pub fn pruned_count(&self) -> usize {
        self.pruned.iter().filter(|&&p| p).count()
    }

    pub fn kept(&self) -> Vec<usize> {
        (0..self.pruned.len()).filter(|&g| !self.pruned[g]).collect()
    }

    /// Per-weight keep mask (`true` = weight survives).
    pub fn weight_mask(&self, partition: &GroupPartition) -> Vec<bool> {
        let mut keep = vec![true; partition.weight_count()];
        for (g, &p) in self.pruned.iter().enumerate() {
            if p {
                for &i in partition.group(g) {
                    keep[i] = false;
                }
            }
        }
        keep
    }
}

/// Zeroes every weight of every pruned group; other weights are untouched.
pub fn apply_mask<T: Real>(weights: &mut Tensor4D<T>, partition: &GroupPartition, mask: &GroupMask) -> Result<()> {
    partition.check(weights)?;
    if mask.len() != partition.len() {
        return Err(Error::shape(
            format!("layer {}", partition.layer_id),
            format!("mask has {} groups, partition {}", mask.len(), partition.len()),
        ));
    }
    let data = weights.data_mut();
    for g in (0..mask.len()).filter(|&g| mask.is_pruned(g)) {
        for &i in partition.group(g) {
            data[i] = T::zero();
        }
    }
    Ok(())
}

/// Fraction of pruned groups.
pub fn layer_sparsity(mask: &GroupMask) -> f64 {
    if mask.is_empty() {
        0.0
    } else {
        mask.pruned_count() as f64 / mask.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_tensor(dims: [usize; 4]) -> Tensor4D<f64> {
        let n = dims.iter().product::<usize>();
        Tensor4D::from_vec(dims, (0..n).map(|v| ((v * 7919) % 23) as f64 - 11.0).collect()).unwrap()
    }

    #[test]
    fn row_and_column_group_counts() {
        let t = seq_tensor([4, 3, 2, 2]);
        let rows = partition(0, &t, GroupType::Row);
        assert_eq!(rows.len(), 4);
        assert!((0..4).all(|g| rows.group_size(g) == 12));
        let cols = partition(0, &t, GroupType::Column);
        assert_eq!(cols.len(), 12);
        assert!((0..12).all(|g| cols.group_size(g) == 4));
    }

    #[test]
    fn cover_is_exact() {
        let t = seq_tensor([4, 3, 2, 2]);
        for ty in [GroupType::Row, GroupType::Column] {
            let p = partition(0, &t, ty);
            let mut all: Vec<usize> = (0..p.len()).flat_map(|g| p.group(g).to_vec()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..48).collect::<Vec<_>>());
        }
    }

    #[test]
    fn column_group_matches_im2col_column() {
        let t = seq_tensor([4, 3, 2, 2]);
        let p = partition(0, &t, GroupType::Column);
        let view = t.as_im2col();
        for j in 0..12 {
            let from_group: Vec<f64> = p.group(j).iter().map(|&i| t.data()[i]).collect();
            let from_view: Vec<f64> = (0..4).map(|i| view.get(i, j)).collect();
            assert_eq!(from_group, from_view);
        }
    }

    #[test]
    fn l1_norm_examples() {
        let t = Tensor4D::from_vec([1, 2, 1, 1], vec![1.0, -2.0]).unwrap();
        let p = partition(0, &t, GroupType::Row);
        assert_eq!(group_l1_norms(&t, &p).unwrap(), vec![3.0]);

        let mut t = seq_tensor([4, 3, 2, 2]);
        let p = partition(0, &t, GroupType::Row);
        let mut mask = GroupMask::new(4);
        mask.prune(2);
        apply_mask(&mut t, &p, &mask).unwrap();
        assert_eq!(group_l1_norms(&t, &p).unwrap()[2], 0.0);
    }

    #[test]
    fn l1_norms_match_index_loop() {
        let t = seq_tensor([4, 3, 2, 2]);
        let cols = partition(0, &t, GroupType::Column);
        let norms = group_l1_norms(&t, &cols).unwrap();
        for (j, norm) in norms.iter().enumerate() {
            let (c, y, x) = (j / 4, (j % 4) / 2, j % 2);
            let brute: f64 = (0..4).map(|n| t.get(n, c, y, x).abs()).sum();
            assert_eq!(*norm, brute);
        }
        let rows = partition(0, &t, GroupType::Row);
        let norms = group_l1_norms(&t, &rows).unwrap();
        for (n, norm) in norms.iter().enumerate() {
            let mut brute = 0.0;
            for c in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        brute += t.get(n, c, y, x).abs();
                    }
                }
            }
            assert_eq!(*norm, brute);
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_ascending(&[0.5, 0.1, 0.3]), vec![2, 0, 1]);
        assert_eq!(rank_ascending(&[0.2, 0.2]), vec![0, 1]);
        assert_eq!(rank_ascending(&[1.0; 5]), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn mask_examples() {
        let t0 = seq_tensor([4, 3, 2, 2]);
        let p = partition(0, &t0, GroupType::Row);

        let mut t = t0.clone();
        apply_mask(&mut t, &p, &GroupMask::new(4)).unwrap();
        assert_eq!(t, t0);

        let mut t = t0.clone();
        apply_mask(&mut t, &p, &GroupMask::from_flags(vec![true; 4])).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));

        let mut t = t0.clone();
        let mut mask = GroupMask::new(4);
        mask.prune(2);
        apply_mask(&mut t, &p, &mask).unwrap();
        for i in 0..48 {
            if (24..36).contains(&i) {
                assert_eq!(t.data()[i], 0.0);
            } else {
                assert_eq!(t.data()[i], t0.data()[i]);
            }
        }
    }

    #[test]
    fn sparsity_examples() {
        let mut m = GroupMask::new(10);
        assert_eq!(layer_sparsity(&m), 0.0);
        for g in 0..5 {
            m.prune(g);
        }
        assert_eq!(layer_sparsity(&m), 0.5);
        for g in 5..10 {
            m.prune(g);
        }
        assert_eq!(layer_sparsity(&m), 1.0);
    }

    #[test]
    fn mismatched_partition_is_rejected() {
        let t = seq_tensor([4, 3, 2, 2]);
        let p = partition_dims(0, [2, 3, 2, 2], GroupType::Row);
        assert!(group_l1_norms(&t, &p).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_a_set_partition(n in 1usize..6, c in 1usize..5, h in 1usize..4, w in 1usize..4, row in any::<bool>()) {
            let ty = if row { GroupType::Row } else { GroupType::Column };
            let p = partition_dims(0, [n, c, h, w], ty);
            prop_assert_eq!(p.len(), if row { n } else { c * h * w });
            let mut seen = vec![0u8; n * c * h * w];
            for g in 0..p.len() {
                for &i in p.group(g) {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }

        #[test]
        fn ranks_are_a_monotone_permutation(norms in proptest::collection::vec(0.0f64..10.0, 1..40)) {
            let ranks = rank_ascending(&norms);
            let mut sorted = ranks.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..norms.len()).collect::<Vec<_>>());
            for a in 0..norms.len() {
                for b in 0..norms.len() {
                    if norms[a] < norms[b] {
                        prop_assert!(ranks[a] < ranks[b]);
                    }
                }
            }
        }

        #[test]
        fn apply_mask_is_idempotent(flags in proptest::collection::vec(any::<bool>(), 6)) {
            let t0 = seq_tensor([6, 2, 2, 1]);
            let p = partition(0, &t0, GroupType::Row);
            let mask = GroupMask::from_flags(flags);
            let mut once = t0.clone();
            apply_mask(&mut once, &p, &mask).unwrap();
            let mut twice = once.clone();
            apply_mask(&mut twice, &p, &mask).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
