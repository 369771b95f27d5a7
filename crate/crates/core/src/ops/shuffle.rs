//! Channel shuffle: reshape the channel axis to (groups, c/groups),
//! transpose, flatten. A pure permutation that interleaves the outputs of
//! grouped convolutions across the full channel range.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// For each output channel index `j`, the input channel it is taken from:
/// `(j mod groups) * (c / groups) + (j div groups)`.
pub fn shuffle_index_map(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::config(format!(
            "channel_shuffle: {channels} channels not divisible by {groups} groups"
        )));
    }
    let per_group = channels / groups;
    Ok((0..channels)
        .map(|j| (j % groups) * per_group + j / groups)
        .collect())
}

pub fn channel_shuffle<T: Scalar>(input: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let map = shuffle_index_map(input.shape().c, groups)?;
    Ok(permute_channels(input, &map))
}

/// Backward of the shuffle is the inverse permutation, i.e. a shuffle with
/// `c / groups` groups.
pub fn channel_shuffle_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    let c = grad_out.shape().c;
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!(
            "channel_shuffle backward: {c} channels not divisible by {groups} groups"
        )));
    }
    channel_shuffle(grad_out, c / groups)
}

pub(crate) fn permute_channels<T: Scalar>(input: &Tensor<T>, map: &[usize]) -> Tensor<T> {
    let shape = input.shape();
    let mut out = Tensor::zeros(shape);
    for i in 0..shape.n {
        for (j, &src) in map.iter().enumerate() {
            out.plane_mut(i, j).copy_from_slice(input.plane(i, src));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn labelled(c: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(Shape::new(1, c, 2, 2).unwrap());
        for j in 0..c {
            let v = j as f64;
            t.plane_mut(0, j).fill(v);
        }
        t
    }

    #[test]
    fn groups_one_is_identity() {
        let t = labelled(5);
        assert_eq!(channel_shuffle(&t, 1).unwrap(), t);
    }

    #[test]
    fn six_channels_two_groups_order() {
        let t = labelled(6);
        let s = channel_shuffle(&t, 2).unwrap();
        let order: Vec<f64> = (0..6).map(|j| s.plane(0, j)[0]).collect();
        assert_eq!(order, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn shuffle_then_complement_shuffle_is_identity() {
        let t = labelled(12);
        for g in [1, 2, 3, 4, 6, 12] {
            let once = channel_shuffle(&t, g).unwrap();
            let back = channel_shuffle(&once, 12 / g).unwrap();
            assert_eq!(back, t, "groups {g}");
        }
    }

    #[test]
    fn non_divisible_rejected() {
        let t = labelled(5);
        assert!(channel_shuffle(&t, 2).is_err());
    }

    proptest! {
        #[test]
        fn index_map_is_a_bijection(per_group in 1usize..=16, groups in 1usize..=8) {
            let c = per_group * groups;
            prop_assume!(c <= 128);
            let mut map = shuffle_index_map(c, groups).unwrap();
            map.sort_unstable();
            prop_assert_eq!(map, (0..c).collect::<Vec<_>>());
        }

        #[test]
        fn backward_inverts_forward(per_group in 1usize..=8, groups in 1usize..=8) {
            let c = per_group * groups;
            prop_assume!(c <= 128);
            let t = labelled(c);
            let y = channel_shuffle(&t, groups).unwrap();
            let back = channel_shuffle_backward(&y, groups).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
