use jointformer::inference::{
    memory_bank_update, multi_scale_infer, scaled_size, segment_frame, segment_video, target_ids,
    BankEntry, InferenceConfig, MemoryBank,
};
use jointformer::memory::init_state;
use jointformer::model::Model;
use jointformer::{ModelConfig, PropagationMode, Tensor};
use rand::Rng;

mod common;
use common::rng;

fn entry(index: usize) -> BankEntry {
    BankEntry {
        index,
        frame: Tensor::zeros([3, 2, 2]),
        masks: vec![Tensor::zeros([1, 2, 2])],
    }
}

fn simulate(interval: usize, cap: usize, last: usize) -> MemoryBank {
    let mut bank = MemoryBank::new(entry(0), interval, cap).unwrap();
    for t in 1..=last {
        memory_bank_update(&mut bank, entry(t)).unwrap();
    }
    bank
}

#[test]
fn bank_policy_examples() {
    assert_eq!(simulate(5, 3, 1).indices(), vec![0, 1]);
    assert_eq!(simulate(5, 3, 22).indices(), vec![0, 10, 15, 20, 22]);
    for last in 1..40 {
        assert_eq!(simulate(5, 0, last).indices(), vec![0, last]);
    }
    assert!(memory_bank_update(&mut simulate(5, 3, 1), entry(0)).is_err());
    assert!(MemoryBank::new(entry(0), 0, 3).is_err());
}

#[test]
fn bank_size_bound_over_200_frames() {
    for cap in 0..5 {
        for interval in 1..7 {
            let mut bank = MemoryBank::new(entry(0), interval, cap).unwrap();
            for t in 1..=200 {
                memory_bank_update(&mut bank, entry(t)).unwrap();
                assert!(bank.slots() <= bank.capacity());
                let idx = bank.indices();
                assert_eq!(idx[0], 0);
                assert_eq!(*idx.last().unwrap(), t);
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
                assert!(idx[1..idx.len() - 1].iter().all(|i| i % interval == 0));
            }
        }
    }
}

fn tiny(seed: u64) -> Model {
    Model::init(ModelConfig::tiny(), seed).unwrap()
}

fn random_video(frames: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..frames)
        .map(|_| Tensor::new([3, 16, 16], (0..768).map(|_| r.random_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

fn two_squares() -> Vec<u8> {
    let mut l = vec![0; 256];
    for y in 2..7 {
        for x in 2..7 {
            l[y * 16 + x] = 1;
            l[(y + 7) * 16 + x + 7] = 2;
        }
    }
    l
}

#[test]
fn zero_weight_model_predicts_one_half() {
    let mut m = tiny(1);
    m.params.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let frames = random_video(2, 2);
    let first = two_squares();
    let masks = [1u8, 2].iter().map(|&id| jointformer::inference::binary_mask(&first, id, (16, 16))).collect();
    let bank = MemoryBank::new(BankEntry { index: 0, frame: frames[0].clone(), masks }, 5, 3).unwrap();
    let states = init_state(2, &m.params.mem_init).unwrap();
    let out = segment_frame(&m, &bank, &states, &frames[1], &InferenceConfig::default(), false).unwrap();
    assert_eq!(out.probs.len(), 2);
    for p in &out.probs {
        assert!(p.data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn segmentation_is_deterministic() {
    let m = tiny(3);
    let frames = random_video(6, 4);
    let cfg = InferenceConfig::default();
    let a = segment_video(&m, &frames, &two_squares(), &cfg).unwrap();
    let b = segment_video(&m, &frames, &two_squares(), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_frame_video_returns_the_annotation() {
    let m = tiny(5);
    let out = segment_video(&m, &random_video(1, 6), &two_squares(), &InferenceConfig::default()).unwrap();
    assert_eq!(out, vec![two_squares()]);
}

#[test]
fn empty_inputs_are_errors() {
    let m = tiny(5);
    let cfg = InferenceConfig::default();
    assert!(segment_video(&m, &random_video(2, 6), &[0; 256], &cfg).is_err());
    assert!(segment_video(&m, &[], &two_squares(), &cfg).is_err());
}

#[test]
fn prefix_runs_reproduce_prefix_outputs() {
    let m = tiny(7);
    let frames = random_video(9, 8);
    let cfg = InferenceConfig {
        mem_interval: 2,
        mem_cap: 2,
        ..InferenceConfig::default()
    };
    let full = segment_video(&m, &frames, &two_squares(), &cfg).unwrap();
    for len in [2, 5, 8] {
        let part = segment_video(&m, &frames[..len], &two_squares(), &cfg).unwrap();
        assert_eq!(part[..], full[..len]);
    }
}

#[test]
fn every_pixel_gets_one_known_label() {
    let m = tiny(9);
    let frames = vec![random_video(1, 10)[0].clone(); 5];
    for mode in PropagationMode::ALL {
        let cfg = InferenceConfig {
            mode,
            ..InferenceConfig::default()
        };
        for labels in segment_video(&m, &frames, &two_squares(), &cfg).unwrap() {
            assert_eq!(labels.len(), 256);
            assert!(labels.iter().all(|l| [0, 1, 2].contains(l)));
        }
    }
}

#[test]
fn single_unmirrored_scale_equals_plain_segmentation() {
    let m = tiny(11);
    let frames = random_video(5, 12);
    let cfg = InferenceConfig::default();
    assert_eq!(
        multi_scale_infer(&m, &frames, &two_squares(), &cfg).unwrap(),
        segment_video(&m, &frames, &two_squares(), &cfg).unwrap()
    );
}

fn mirror_cols<T: Copy>(data: &[T], c: usize, w: usize) -> Vec<T> {
    let h = data.len() / c / w;
    let mut out = data.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = data[(ch * h + y) * w + w - 1 - x];
            }
        }
    }
    out
}

#[test]
fn mirrored_average_is_symmetric_on_symmetric_scenes() {
    let m = tiny(13);
    let frames: Vec<Tensor> = random_video(4, 14)
        .into_iter()
        .map(|f| {
            let mut d = f.data().to_vec();
            let fl = mirror_cols(&d, 3, 16);
            d.iter_mut().zip(&fl).for_each(|(a, b)| *a = (*a + b) / 2.0);
            Tensor::new([3, 16, 16], d).unwrap()
        })
        .collect();
    let mut first = vec![0u8; 256];
    for y in 4..12 {
        for x in 5..11 {
            first[y * 16 + x] = 1;
        }
    }
    let cfg = InferenceConfig {
        mirror: true,
        ..InferenceConfig::default()
    };
    let plain = segment_video(&m, &frames, &first, &InferenceConfig::default()).unwrap();
    let out = multi_scale_infer(&m, &frames, &first, &cfg).unwrap();
    for (t, labels) in out.iter().enumerate() {
        assert_eq!(labels, &mirror_cols(labels, 1, 16), "frame {t}");
        // both variants see identical inputs, so labels on symmetric pixels agree
        let sym_plain: Vec<bool> = (0..256).map(|i| plain[t][i] == mirror_cols(&plain[t], 1, 16)[i]).collect();
        for i in 0..256 {
            if sym_plain[i] {
                assert_eq!(labels[i], plain[t][i]);
            }
        }
    }
}

#[test]
fn multi_scale_runs_and_keeps_input_size() {
    assert_eq!(scaled_size((16, 16), 1.5, 4), (24, 24));
    assert_eq!(scaled_size((64, 64), 1.1, 8), (72, 72));
    let m = tiny(15);
    let frames = random_video(3, 16);
    let cfg = InferenceConfig {
        scales: vec![1.0, 1.5],
        mirror: true,
        ..InferenceConfig::default()
    };
    let out = multi_scale_infer(&m, &frames, &two_squares(), &cfg).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out.iter().all(|l| l.len() == 256));
    assert_eq!(target_ids(&out[0]), vec![1, 2]);
    let bad = InferenceConfig {
        scales: vec![],
        ..InferenceConfig::default()
    };
    assert!(multi_scale_infer(&m, &frames, &two_squares(), &bad).is_err());
}
