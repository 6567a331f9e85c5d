//! Rearranging two H x W token grids into one scan sequence and back.
//!
//! Two frames are merged into a "super image" either sequentially (all of
//! frame 0, then all of frame 1) or interleaved (tokens alternate frames
//! along the scan axis), then traversed horizontally or vertically, forward
//! or reversed. Source index space: frame 0 token (r, c) is `r*W + c`,
//! frame 1 token (r, c) is `H*W + r*W + c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{selective_scan, SsmParams};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanMode {
    Interleaved,
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanAxis {
    Horizontal,
    Vertical,
}

/// Which axis the interleave alternates along. `AxisMatched` (default)
/// alternates along the scan axis itself; `ColumnOnly` always interleaves
/// columns and lets the vertical scan walk the widened image column by
/// column.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterleavePolicy {
    #[default]
    AxisMatched,
    ColumnOnly,
}

/// A fixed bijection between two token grids and one scan sequence.
///
/// `forward_perm[t]` is the source index feeding sequence position `t`;
/// `inverse_perm[s]` is the sequence position holding source index `s`.
#[derive(Clone, Debug)]
pub struct SuperImageLayout {
    pub mode: ScanMode,
    pub axis: ScanAxis,
    pub reverse: bool,
    pub h: usize,
    pub w: usize,
    pub forward_perm: Vec<usize>,
    pub inverse_perm: Vec<usize>,
}

pub fn build_layout(
    h: usize,
    w: usize,
    mode: ScanMode,
    axis: ScanAxis,
    reverse: bool,
) -> SuperImageLayout {
    build_layout_with_policy(h, w, mode, axis, reverse, InterleavePolicy::AxisMatched)
}

pub fn build_layout_with_policy(
    h: usize,
    w: usize,
    mode: ScanMode,
    axis: ScanAxis,
    reverse: bool,
    policy: InterleavePolicy,
) -> SuperImageLayout {
    assert!(h >= 1 && w >= 1);
    let hw = h * w;
    // grid positions in scan-axis traversal order
    let positions: Vec<usize> = match axis {
        ScanAxis::Horizontal => (0..hw).collect(),
        ScanAxis::Vertical => {
            let mut v = Vec::with_capacity(hw);
            for c in 0..w {
                for r in 0..h {
                    v.push(r * w + c);
                }
            }
            v
        }
    };
    let mut forward_perm = Vec::with_capacity(2 * hw);
    match mode {
        ScanMode::Sequential => {
            forward_perm.extend(positions.iter().copied());
            forward_perm.extend(positions.iter().map(|&p| hw + p));
        }
        ScanMode::Interleaved => match (policy, axis) {
            // Alternate frames at each step of the traversal; for the
            // column-only policy under a vertical scan, walk whole columns
            // of the width-doubled super image instead.
            (InterleavePolicy::ColumnOnly, ScanAxis::Vertical) => {
                for c in 0..w {
                    for r in 0..h {
                        forward_perm.push(r * w + c);
                    }
                    for r in 0..h {
                        forward_perm.push(hw + r * w + c);
                    }
                }
            }
            _ => {
                for &p in &positions {
                    forward_perm.push(p);
                    forward_perm.push(hw + p);
                }
            }
        },
    }
    if reverse {
        forward_perm.reverse();
    }
    let mut inverse_perm = vec![0usize; 2 * hw];
    for (t, &s) in forward_perm.iter().enumerate() {
        inverse_perm[s] = t;
    }
    SuperImageLayout {
        mode,
        axis,
        reverse,
        h,
        w,
        forward_perm,
        inverse_perm,
    }
}

/// The four layouts a block scans: horizontal and vertical, each forward
/// and reversed, with the rearrangement mode chosen per axis.
#[derive(Clone, Debug)]
pub struct ScanDirectionSet {
    pub layouts: [SuperImageLayout; 4],
}

impl ScanDirectionSet {
    pub fn build(
        h: usize,
        w: usize,
        mode_h: ScanMode,
        mode_v: ScanMode,
        policy: InterleavePolicy,
    ) -> Self {
        ScanDirectionSet {
            layouts: [
                build_layout_with_policy(h, w, mode_h, ScanAxis::Horizontal, false, policy),
                build_layout_with_policy(h, w, mode_h, ScanAxis::Horizontal, true, policy),
                build_layout_with_policy(h, w, mode_v, ScanAxis::Vertical, false, policy),
                build_layout_with_policy(h, w, mode_v, ScanAxis::Vertical, true, policy),
            ],
        }
    }
}

/// Merge `f0, f1: [B,L,H,W]` into a `[B, 2HW, L]` sequence ordered by the
/// layout. Differentiable.
pub fn scatter_to_sequence<E: Element>(
    f0: &Tensor<E>,
    f1: &Tensor<E>,
    layout: &SuperImageLayout,
) -> Result<Tensor<E>> {
    if f0.shape() != f1.shape() {
        return Err(Error::InvalidShape("scatter: frame shapes differ".into()));
    }
    let (b, l, h, w) = (f0.shape()[0], f0.shape()[1], f0.shape()[2], f0.shape()[3]);
    if h != layout.h || w != layout.w {
        return Err(Error::InvalidShape(format!(
            "scatter: layout is {}x{}, frames are {h}x{w}",
            layout.h, layout.w
        )));
    }
    let hw = h * w;
    let a = f0.reshape(&[b, l, hw])?;
    let bb = f1.reshape(&[b, l, hw])?;
    let both = Tensor::cat(&[a, bb], 2)?;
    let seq = both.index_select(2, &layout.forward_perm);
    Ok(seq.permute(&[0, 2, 1]))
}

/// Inverse of [`scatter_to_sequence`]: `[B, 2HW, L]` back to two frames.
pub fn gather_from_sequence<E: Element>(
    seq: &Tensor<E>,
    layout: &SuperImageLayout,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (b, t, l) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    let hw = layout.h * layout.w;
    if t != 2 * hw {
        return Err(Error::InvalidShape(format!(
            "gather: sequence length {t} does not match layout {}x{}",
            layout.h, layout.w
        )));
    }
    let both = seq.permute(&[0, 2, 1]).index_select(2, &layout.inverse_perm);
    let f0 = both.narrow(2, 0, hw).reshape(&[b, l, layout.h, layout.w])?;
    let f1 = both.narrow(2, hw, hw).reshape(&[b, l, layout.h, layout.w])?;
    Ok((f0, f1))
}

/// Scan the frame pair in all four directions, each with its own parameter
/// set, and merge the results by elementwise sum (fixed direction order:
/// horizontal fwd, horizontal rev, vertical fwd, vertical rev).
pub fn multi_directional_scan<E: Element>(
    f0: &Tensor<E>,
    f1: &Tensor<E>,
    mode_h: ScanMode,
    mode_v: ScanMode,
    policy: InterleavePolicy,
    ssm4: &[SsmParams<E>; 4],
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (h, w) = (f0.shape()[2], f0.shape()[3]);
    let dirs = ScanDirectionSet::build(h, w, mode_h, mode_v, policy);
    let mut g0: Option<Tensor<E>> = None;
    let mut g1: Option<Tensor<E>> = None;
    for (layout, p) in dirs.layouts.iter().zip(ssm4.iter()) {
        let seq = scatter_to_sequence(f0, f1, layout)?;
        let y = selective_scan(&seq, p)?;
        let (y0, y1) = gather_from_sequence(&y, layout)?;
        g0 = Some(match g0 {
            Some(acc) => acc.add(&y0)?,
            None => y0,
        });
        g1 = Some(match g1 {
            Some(acc) => acc.add(&y1)?,
            None => y1,
        });
    }
    Ok((g0.unwrap(), g1.unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const MODES: [ScanMode; 2] = [ScanMode::Interleaved, ScanMode::Sequential];
    const AXES: [ScanAxis; 2] = [ScanAxis::Horizontal, ScanAxis::Vertical];

    #[test]
    fn one_by_two_interleaved_horizontal() {
        let l = build_layout(1, 2, ScanMode::Interleaved, ScanAxis::Horizontal, false);
        // a0 b0 a1 b1 with frame-1 sources offset by HW=2
        assert_eq!(l.forward_perm, vec![0, 2, 1, 3]);
    }

    #[test]
    fn one_by_two_sequential_horizontal() {
        let l = build_layout(1, 2, ScanMode::Sequential, ScanAxis::Horizontal, false);
        assert_eq!(l.forward_perm, vec![0, 1, 2, 3]);
    }

    #[test]
    fn two_by_one_interleaved_vertical() {
        let l = build_layout(2, 1, ScanMode::Interleaved, ScanAxis::Vertical, false);
        assert_eq!(l.forward_perm, vec![0, 2, 1, 3]);
    }

    #[test]
    fn exhaustive_bijection_up_to_eight() {
        for h in 1..=8usize {
            for w in 1..=8usize {
                for mode in MODES {
                    for axis in AXES {
                        for reverse in [false, true] {
                            for policy in
                                [InterleavePolicy::AxisMatched, InterleavePolicy::ColumnOnly]
                            {
                                let l = build_layout_with_policy(h, w, mode, axis, reverse, policy);
                                assert_eq!(l.forward_perm.len(), 2 * h * w);
                                let mut seen = vec![false; 2 * h * w];
                                for &s in &l.forward_perm {
                                    assert!(!seen[s]);
                                    seen[s] = true;
                                }
                                for s in 0..2 * h * w {
                                    assert_eq!(l.forward_perm[l.inverse_perm[s]], s);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn reverse_layout_is_element_reversal() {
        for mode in MODES {
            for axis in AXES {
                let f = build_layout(5, 7, mode, axis, false);
                let r = build_layout(5, 7, mode, axis, true);
                let mut rev = f.forward_perm.clone();
                rev.reverse();
                assert_eq!(r.forward_perm, rev);
            }
        }
    }

    #[test]
    fn interleaved_colocated_pairs_are_adjacent() {
        for axis in AXES {
            let l = build_layout(6, 5, ScanMode::Interleaved, axis, false);
            let hw = 30;
            for s in 0..hw {
                let d = l.inverse_perm[s].abs_diff(l.inverse_perm[hw + s]);
                assert_eq!(d, 1, "axis {axis:?}, source {s}");
            }
        }
    }

    #[test]
    fn sequential_colocated_pairs_separated_by_hw_minus_one() {
        for axis in AXES {
            let l = build_layout(6, 5, ScanMode::Sequential, axis, false);
            let hw = 30;
            for s in 0..hw {
                let d = l.inverse_perm[s].abs_diff(l.inverse_perm[hw + s]);
                // hw - 1 tokens strictly between the pair
                assert_eq!(d, hw, "axis {axis:?}, source {s}");
            }
        }
    }

    fn rand_frames(rng: &mut StdRng, b: usize, l: usize, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
        let gen = |rng: &mut StdRng| -> Tensor<f64> {
            Tensor::new(
                (0..b * l * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                &[b, l, h, w],
            )
        };
        (gen(rng), gen(rng))
    }

    #[test]
    fn scatter_gather_round_trip_all_directions() {
        let mut rng = StdRng::seed_from_u64(20);
        let (f0, f1) = rand_frames(&mut rng, 2, 3, 4, 5);
        for mode in MODES {
            for axis in AXES {
                for reverse in [false, true] {
                    let l = build_layout(4, 5, mode, axis, reverse);
                    let seq = scatter_to_sequence(&f0, &f1, &l).unwrap();
                    assert_eq!(seq.shape(), &[2, 40, 3]);
                    let (g0, g1) = gather_from_sequence(&seq, &l).unwrap();
                    assert_eq!(g0.data(), f0.data());
                    assert_eq!(g1.data(), f1.data());
                }
            }
        }
    }

    #[test]
    fn scatter_matches_layout_ordering_one_by_two() {
        let f0 = Tensor::new(vec![10.0, 11.0], &[1, 1, 1, 2]);
        let f1 = Tensor::new(vec![20.0, 21.0], &[1, 1, 1, 2]);
        let l = build_layout(1, 2, ScanMode::Interleaved, ScanAxis::Horizontal, false);
        let seq = scatter_to_sequence(&f0, &f1, &l).unwrap();
        assert_eq!(seq.data(), &[10.0, 20.0, 11.0, 21.0]);
        let ls = build_layout(1, 2, ScanMode::Sequential, ScanAxis::Horizontal, false);
        let seq = scatter_to_sequence(&f0, &f1, &ls).unwrap();
        assert_eq!(seq.data(), &[10.0, 11.0, 20.0, 21.0]);
    }

    #[test]
    fn constant_frames_give_constant_sequence() {
        let f = Tensor::<f64>::full(&[1, 2, 3, 3], 3.5);
        let l = build_layout(3, 3, ScanMode::Interleaved, ScanAxis::Vertical, true);
        let seq = scatter_to_sequence(&f, &f, &l).unwrap();
        assert!(seq.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn gather_with_wrong_layout_is_not_identity() {
        let mut rng = StdRng::seed_from_u64(21);
        let (f0, f1) = rand_frames(&mut rng, 1, 2, 3, 4);
        let li = build_layout(3, 4, ScanMode::Interleaved, ScanAxis::Horizontal, false);
        let ls = build_layout(3, 4, ScanMode::Sequential, ScanAxis::Horizontal, false);
        let seq = scatter_to_sequence(&f0, &f1, &li).unwrap();
        let (g0, _) = gather_from_sequence(&seq, &ls).unwrap();
        assert_ne!(g0.data(), f0.data());
    }

    #[test]
    fn zero_sequence_gathers_to_zero_frames() {
        let l = build_layout(2, 2, ScanMode::Sequential, ScanAxis::Vertical, false);
        let seq = Tensor::<f64>::zeros(&[1, 8, 3]);
        let (g0, g1) = gather_from_sequence(&seq, &l).unwrap();
        assert!(g0.data().iter().all(|&v| v == 0.0));
        assert!(g1.data().iter().all(|&v| v == 0.0));
    }

    fn skip_only_params(l: usize, n: usize, rng: &mut StdRng) -> SsmParams<f64> {
        let mut p = SsmParams::init(l, n, rng);
        p.s_c = Tensor::zeros(&[l, n]);
        p.d_skip = Tensor::ones(&[l]);
        p
    }

    #[test]
    fn skip_path_scan_quadruples_input() {
        let mut rng = StdRng::seed_from_u64(22);
        let (f0, f1) = rand_frames(&mut rng, 1, 3, 4, 4);
        let ssm4 = [
            skip_only_params(3, 2, &mut rng),
            skip_only_params(3, 2, &mut rng),
            skip_only_params(3, 2, &mut rng),
            skip_only_params(3, 2, &mut rng),
        ];
        let (g0, g1) = multi_directional_scan(
            &f0,
            &f1,
            ScanMode::Interleaved,
            ScanMode::Interleaved,
            InterleavePolicy::AxisMatched,
            &ssm4,
        )
        .unwrap();
        for (g, f) in [(&g0, &f0), (&g1, &f1)] {
            for (gv, fv) in g.data().iter().zip(f.data()) {
                assert!((gv - 4.0 * fv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_hand_composed_pipeline_on_two_by_two() {
        let mut rng = StdRng::seed_from_u64(23);
        let (f0, f1) = rand_frames(&mut rng, 1, 2, 2, 2);
        let ssm4: [SsmParams<f64>; 4] = std::array::from_fn(|_| SsmParams::init(2, 3, &mut rng));
        let (g0, g1) = multi_directional_scan(
            &f0,
            &f1,
            ScanMode::Interleaved,
            ScanMode::Sequential,
            InterleavePolicy::AxisMatched,
            &ssm4,
        )
        .unwrap();
        let dirs = ScanDirectionSet::build(
            2,
            2,
            ScanMode::Interleaved,
            ScanMode::Sequential,
            InterleavePolicy::AxisMatched,
        );
        let mut e0 = Tensor::zeros(&[1, 2, 2, 2]);
        let mut e1 = Tensor::zeros(&[1, 2, 2, 2]);
        for (layout, p) in dirs.layouts.iter().zip(&ssm4) {
            let y = selective_scan(&scatter_to_sequence(&f0, &f1, layout).unwrap(), p).unwrap();
            let (y0, y1) = gather_from_sequence(&y, layout).unwrap();
            e0 = e0.add(&y0).unwrap();
            e1 = e1.add(&y1).unwrap();
        }
        assert_eq!(g0.data(), e0.data());
        assert_eq!(g1.data(), e1.data());
    }

    #[test]
    fn interleaved_frame_swap_is_pair_swap_on_sequence() {
        let mut rng = StdRng::seed_from_u64(24);
        let (f0, f1) = rand_frames(&mut rng, 1, 2, 3, 3);
        for axis in AXES {
            let l = build_layout(3, 3, ScanMode::Interleaved, axis, false);
            let seq = scatter_to_sequence(&f0, &f1, &l).unwrap();
            let swapped = scatter_to_sequence(&f1, &f0, &l).unwrap();
            let (_, t, ch) = (1, 18, 2);
            for pair in 0..t / 2 {
                for c in 0..ch {
                    assert_eq!(
                        swapped.data()[(2 * pair) * ch + c],
                        seq.data()[(2 * pair + 1) * ch + c]
                    );
                    assert_eq!(
                        swapped.data()[(2 * pair + 1) * ch + c],
                        seq.data()[(2 * pair) * ch + c]
                    );
                }
            }
        }
    }

    #[test]
    fn frame_swap_swaps_outputs_on_frame_symmetric_path() {
        // with C = 0 the scan degenerates to a per-token map, which treats
        // the two frames symmetrically for every layout
        let mut rng = StdRng::seed_from_u64(25);
        let (f0, f1) = rand_frames(&mut rng, 1, 3, 4, 4);
        let ssm4: [SsmParams<f64>; 4] = std::array::from_fn(|_| skip_only_params(3, 2, &mut rng));
        let (g0, g1) = multi_directional_scan(
            &f0, &f1,
            ScanMode::Interleaved, ScanMode::Interleaved,
            InterleavePolicy::AxisMatched,
            &ssm4,
        )
        .unwrap();
        let (s0, s1) = multi_directional_scan(
            &f1, &f0,
            ScanMode::Interleaved, ScanMode::Interleaved,
            InterleavePolicy::AxisMatched,
            &ssm4,
        )
        .unwrap();
        assert_eq!(s0.data(), g1.data());
        assert_eq!(s1.data(), g0.data());
    }

    #[test]
    fn output_shape_preserved_for_all_configurations() {
        let mut rng = StdRng::seed_from_u64(26);
        let (f0, f1) = rand_frames(&mut rng, 2, 2, 3, 5);
        for mode_h in MODES {
            for mode_v in MODES {
                for policy in [InterleavePolicy::AxisMatched, InterleavePolicy::ColumnOnly] {
                    let ssm4: [SsmParams<f64>; 4] =
                        std::array::from_fn(|_| SsmParams::init(2, 2, &mut rng));
                    let (g0, g1) =
                        multi_directional_scan(&f0, &f1, mode_h, mode_v, policy, &ssm4).unwrap();
                    assert_eq!(g0.shape(), f0.shape());
                    assert_eq!(g1.shape(), f1.shape());
                }
            }
        }
    }

    #[test]
    fn scatter_gradient_flows_through_permutation() {
        let mut rng = StdRng::seed_from_u64(27);
        let f0 = Tensor::new(
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            &[1, 2, 2, 2],
        )
        .requires_grad_leaf();
        let f1 = Tensor::<f64>::zeros(&[1, 2, 2, 2]).requires_grad_leaf();
        let l = build_layout(2, 2, ScanMode::Interleaved, ScanAxis::Horizontal, true);
        let seq = scatter_to_sequence(&f0, &f1, &l).unwrap();
        let w = Tensor::new((0..16).map(|i| i as f64).collect(), &[1, 8, 2]);
        let grads = seq.mul(&w).unwrap().sum_all().backward();
        // every frame-0 element receives exactly its sequence weight
        let g0 = grads.get(&f0).unwrap();
        for (r, c, ch) in
            (0..2).flat_map(|r| (0..2).flat_map(move |c| (0..2).map(move |ch| (r, c, ch))))
        {
            let src = r * 2 + c;
            let t = l.inverse_perm[src];
            assert_eq!(g0[(ch * 2 + r) * 2 + c], w.data()[t * 2 + ch]);
        }
    }
}
