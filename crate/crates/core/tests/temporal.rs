mod oracle;

use dolphin_core::temporal::{build_groups, condense_and_project, JointProjector, TemporalMerger};
use dolphin_core::{Error, Tape, Tensor};

use oracle::Rows;

const D: usize = 16;
const DLLM: usize = 24;

fn streams(b: usize, t: usize, seed: u64) -> (Tensor, Tensor) {
    (
        Tensor::randn(&[b, t, 5, D], seed, 1.0).unwrap(),
        Tensor::randn(&[b, t, 3, D], seed ^ 9, 1.0).unwrap(),
    )
}

fn parts() -> (TemporalMerger, JointProjector) {
    (
        TemporalMerger::new("m", D, 4, 1).unwrap(),
        JointProjector::new("p", D, DLLM, 1).unwrap(),
    )
}

fn project(x: &[f64], p: &JointProjector) -> Vec<f64> {
    let h = oracle::linear(&vec![x.to_vec()], &p.fc1);
    let h: Rows = h
        .into_iter()
        .map(|r| r.into_iter().map(oracle::gelu).collect())
        .collect();
    oracle::linear(&h, &p.fc2).remove(0)
}

fn mean_rows(x: &Rows) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x[0].len())
        .map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect()
}

#[test]
fn batched_merge_equals_the_group_path() {
    let (m, p) = parts();
    let (v, a) = streams(2, 4, 3);
    let tape = Tape::new();
    let (vv, av) = (tape.constant(&v), tape.constant(&a));
    let batched = m.forward(&tape, vv, av, &p).unwrap();
    let groups: Vec<_> = build_groups(vv, av)
        .unwrap()
        .into_iter()
        .map(|g| m.bidir_context(&tape, g).unwrap())
        .collect();
    let grouped = condense_and_project(&tape, &groups, &p).unwrap();
    assert_eq!(batched.shape(), [2, 8, DLLM]);
    assert_eq!(batched.shape(), grouped.shape());
    let diff = batched
        .to_vec()
        .iter()
        .zip(grouped.to_vec())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn tokens_interleave_visual_then_audio_per_frame() {
    let (m, p) = parts();
    let (b, t) = (2, 3);
    let (v, a) = streams(b, t, 4);
    let tape = Tape::new();
    let out = m
        .forward(&tape, tape.constant(&v), tape.constant(&a), &p)
        .unwrap()
        .value();
    let (vf, af, of) = (oracle::frames(&v), oracle::frames(&a), oracle::frames(&out));
    for s in 0..b {
        for f in 0..t {
            let (vt, at) = (&vf[s * t + f], &af[s * t + f]);
            let v_tok = project(&mean_rows(&oracle::attention(at, vt, &m.visual_ctx)), &p);
            let a_tok = project(&mean_rows(&oracle::attention(vt, at, &m.audio_ctx)), &p);
            let got = &of[s];
            assert!(oracle::max_abs_diff(&vec![got[2 * f].clone()], &vec![v_tok]) < 1e-10);
            assert!(oracle::max_abs_diff(&vec![got[2 * f + 1].clone()], &vec![a_tok]) < 1e-10);
        }
    }
}

#[test]
fn eight_frames_give_sixteen_tokens() {
    let (m, p) = parts();
    let (v, a) = streams(1, 8, 5);
    let tape = Tape::new();
    let out = m
        .forward(&tape, tape.constant(&v), tape.constant(&a), &p)
        .unwrap();
    assert_eq!(out.shape(), [1, 16, DLLM]);
}

#[test]
fn frame_permutation_permutes_token_pairs() {
    let (m, p) = parts();
    let t = 4;
    let (v, a) = streams(1, t, 6);
    let perm = [2, 0, 3, 1];
    let shuffle = |x: &Tensor| {
        let s = x.shape();
        let per = s[2] * s[3];
        let data: Vec<f64> = perm
            .iter()
            .flat_map(|&f| x.data()[f * per..(f + 1) * per].to_vec())
            .collect();
        Tensor::new(s, data).unwrap()
    };
    let tape = Tape::new();
    let base = m
        .forward(&tape, tape.constant(&v), tape.constant(&a), &p)
        .unwrap()
        .value();
    let moved = m
        .forward(
            &tape,
            tape.constant(&shuffle(&v)),
            tape.constant(&shuffle(&a)),
            &p,
        )
        .unwrap()
        .value();
    let (b, mv) = (oracle::rows(&base), oracle::rows(&moved));
    for (i, &f) in perm.iter().enumerate() {
        assert_eq!(mv[2 * i], b[2 * f]);
        assert_eq!(mv[2 * i + 1], b[2 * f + 1]);
    }
}

#[test]
fn bypassed_projector_keeps_the_adapter_width() {
    let (m, mut p) = parts();
    p.set_bypass(true);
    assert_eq!(p.output_width(), D);
    let (v, a) = streams(1, 2, 7);
    let tape = Tape::new();
    let out = m
        .forward(&tape, tape.constant(&v), tape.constant(&a), &p)
        .unwrap();
    assert_eq!(out.shape(), [1, 4, D]);
}

#[test]
fn frame_count_mismatch_is_an_alignment_error() {
    let (m, p) = parts();
    let tape = Tape::new();
    let v = tape.constant(&Tensor::zeros(&[1, 4, 5, D]).unwrap());
    let a = tape.constant(&Tensor::zeros(&[1, 3, 3, D]).unwrap());
    assert!(matches!(
        m.forward(&tape, v, a, &p),
        Err(Error::Alignment(_))
    ));
    assert!(matches!(build_groups(v, a), Err(Error::Alignment(_))));
    let a = tape.constant(&Tensor::zeros(&[1, 4, 3, D + 1]).unwrap());
    assert!(matches!(
        m.forward(&tape, v, a, &p),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn condensing_needs_contextualized_groups() {
    let (_, p) = parts();
    let tape = Tape::new();
    let v = tape.constant(&Tensor::zeros(&[1, 2, 5, D]).unwrap());
    let a = tape.constant(&Tensor::zeros(&[1, 2, 3, D]).unwrap());
    let groups = build_groups(v, a).unwrap();
    assert_eq!(groups.iter().map(|g| g.frame).collect::<Vec<_>>(), [0, 1]);
    assert!(matches!(
        condense_and_project(&tape, &groups, &p),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        condense_and_project(&tape, &[], &p),
        Err(Error::Contract(_))
    ));
}
