use jointformer::io::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, frame_path, list_videos, mask_path, read_pgm,
    read_video, write_scaled_map, write_video,
};
use jointformer::{Error, Tensor};

#[test]
fn pgm_header_and_round_trip() {
    let px = [0u8, 7, 255, 128, 3, 9];
    let bytes = encode_pgm(&px, (2, 3)).unwrap();
    assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
    assert_eq!(&bytes[11..], &px);
    assert_eq!(decode_pgm(&bytes).unwrap(), (px.to_vec(), (2, 3)));
    assert!(encode_pgm(&px, (2, 2)).is_err());
}

#[test]
fn ppm_round_trip_quantizes_to_bytes() {
    let vals: Vec<f64> = (0..3 * 4 * 5).map(|i| i as f64 / 59.0).collect();
    let img = Tensor::new([3, 4, 5], vals).unwrap();
    let bytes = encode_ppm(&img).unwrap();
    assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
    // interleaved rgb: first pixel holds channel 0, 1, 2 of position 0
    assert_eq!(&bytes[11..14], &[0, (20.0f64 / 59.0 * 255.0).round() as u8, (40.0f64 / 59.0 * 255.0).round() as u8]);
    let back = decode_ppm(&bytes).unwrap();
    assert_eq!(back.shape(), img.shape());
    assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    assert_eq!(encode_ppm(&back).unwrap(), bytes);
    assert!(encode_ppm(&Tensor::zeros([1, 4, 5])).is_err());
}

#[test]
fn comments_in_headers_are_skipped() {
    let bytes = b"P5\n# made by hand\n2 1 # width height\n255\n\x01\x02";
    assert_eq!(decode_pgm(bytes).unwrap(), (vec![1, 2], (1, 2)));
}

fn offset(r: jointformer::Result<impl std::fmt::Debug>) -> usize {
    match r {
        Err(Error::Parse { offset, .. }) => offset,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn parse_errors_carry_offsets() {
    assert_eq!(offset(decode_pgm(b"P6\n1 1\n255\n\x00\x00\x00")), 0);
    assert_eq!(offset(decode_pgm(b"P5\nx 1\n255\n\x00")), 3);
    assert_eq!(offset(decode_pgm(b"P5\n1 1\n65535\n\x00\x00")), 7);
    assert_eq!(offset(decode_pgm(b"P5\n2 2\n255\n\x00\x00")), 13);
    assert_eq!(offset(decode_pgm(b"P5\n1 1\n255\n\x00\x00")), 12);
    assert_eq!(offset(decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00")), 14);
}

#[test]
fn scaled_map_writes_a_range_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("maps").join("gate.pgm");
    write_scaled_map(&path, &[-1.0, 0.0, 1.0, 0.5], (2, 2)).unwrap();
    let (px, size) = read_pgm(&path).unwrap();
    assert_eq!(size, (2, 2));
    assert_eq!(px, vec![0, 128, 255, 191]);
    let side = std::fs::read_to_string(dir.path().join("maps").join("gate.pgm.txt")).unwrap();
    let nums: Vec<f64> = side.split_whitespace().map(|s| s.parse().unwrap()).collect();
    assert_eq!(nums, vec![-1.0, 1.0]);
}

#[test]
fn video_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let frames: Vec<Tensor> = (0..3u8).map(|t| Tensor::full([3, 4, 6], f64::from(51 * t) / 255.0)).collect();
    let labels = vec![vec![1u8; 24], vec![2u8; 24]];
    write_video(&root.join("video_001"), &frames, &labels).unwrap();
    write_video(&root.join("video_000"), &frames[..1], &labels[..1]).unwrap();
    std::fs::create_dir(root.join("other")).unwrap();
    assert!(frame_path(&root.join("video_001"), 2).ends_with("frames/00002.ppm"));
    assert!(mask_path(&root.join("video_001"), 1).ends_with("masks/00001.pgm"));

    let listed = list_videos(root).unwrap();
    assert_eq!(listed, vec![root.join("video_000"), root.join("video_001")]);
    let v = read_video(&listed[1]).unwrap();
    assert_eq!(v.name, "video_001");
    assert_eq!(v.frames, frames);
    assert_eq!(v.labels, vec![Some(labels[0].clone()), Some(labels[1].clone()), None]);
    assert!(matches!(read_video(&root.join("missing")), Err(Error::Io { .. })));
}
