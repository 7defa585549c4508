mod common;

use std::path::Path;

use common::*;
use proptest::prelude::*;
use zsseg::dataio::*;
use zsseg::error::Error;
use zsseg::labels::LabelMap;
use zsseg::tensor::Tensor4;

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "labels"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out.push(("manifest".into(), std::fs::read(dir.join("manifest.txt")).unwrap()));
    out
}

#[test]
fn generation_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SceneSpec::benchmark();
    gen_dataset(&spec, 5, 77, a.path()).unwrap();
    gen_dataset(&spec, 5, 77, b.path()).unwrap();
    assert_eq!(files_under(a.path()), files_under(b.path()));
    let c = tempfile::tempdir().unwrap();
    gen_dataset(&spec, 5, 78, c.path()).unwrap();
    assert_ne!(files_under(a.path()), files_under(c.path()));
}

#[test]
fn zero_jitter_objects_carry_prototype_colour() {
    let mut spec = SceneSpec::benchmark();
    spec.classes.truncate(1);
    spec.unseen.clear();
    spec.object_jitter = 0.0;
    spec.pixel_jitter = 0.0;
    let scene = render_scene(&spec, 3, 0).unwrap();
    let proto = spec.classes[0].color;
    let [_, _, h, w] = scene.image.dims();
    let mut seen = 0;
    for i in 0..h * w {
        if scene.visible[i] == Some(0) {
            seen += 1;
            for (c, &p) in proto.iter().enumerate() {
                assert_eq!(scene.image.at(0, c, i / w, i % w), p);
            }
        }
    }
    assert!(seen > 0);

    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(&spec, 1, 3, dir.path()).unwrap();
    let s = m.load_sample(0).unwrap();
    for i in 0..h * w {
        if s.labels.data()[i] == 0 {
            for (c, &p) in proto.iter().enumerate() {
                assert_eq!(s.image.at(0, c, i / w, i % w), (p * 255.0).round() / 255.0);
            }
        }
    }
}

#[test]
fn fifty_images_cover_every_class_and_align_with_prototypes() {
    let spec = SceneSpec::benchmark();
    let k = spec.num_classes();
    let protos = spec.prototypes();
    let mut hist = vec![0usize; k];
    for index in 0..50 {
        let scene = render_scene(&spec, 12, index).unwrap();
        let [_, _, h, w] = scene.image.dims();
        let mut present = vec![false; k];
        for (i, &l) in scene.labels.data().iter().enumerate() {
            if l == 255 {
                continue;
            }
            present[l as usize] = true;
            let px: Vec<f64> = (0..3).map(|c| scene.image.at(0, c, i / w, i % w)).collect();
            let nearest = (0..k)
                .min_by(|&a, &b| {
                    let da: f64 = protos[a].iter().zip(&px).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = protos[b].iter().zip(&px).map(|(p, q)| (p - q).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, l as usize, "image {index} pixel {i}");
        }
        for o in &scene.objects {
            assert!(o.top + o.height <= h && o.left + o.width <= w);
        }
        for (c, p) in present.iter().enumerate() {
            hist[c] += *p as usize;
        }
    }
    assert!(hist.iter().all(|&n| n >= 1), "{hist:?}");
}

#[test]
fn ignore_band_separates_objects_from_canvas() {
    let spec = SceneSpec::benchmark();
    let scene = render_scene(&spec, 4, 2).unwrap();
    let (h, w) = (scene.labels.height(), scene.labels.width());
    for y in 0..h {
        for x in 0..w {
            let l = scene.labels.get(y, x);
            if l == 255 {
                continue;
            }
            // a labelled pixel never touches a different visible surface
            for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let v = scene.visible[ny as usize * w + nx as usize];
                assert_eq!(v, Some(l));
            }
        }
    }
}

#[test]
fn image_round_trip_within_quantisation() {
    let mut r = rng(50);
    let t = random_tensor(&mut r, [1, 3, 7, 5], 0.5);
    let img = Tensor4::from_vec(t.dims(), t.data().iter().map(|v| v + 0.5).collect()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ppm");
    write_image(&p, &img).unwrap();
    let back = read_image(&p).unwrap();
    assert_eq!(back.dims(), img.dims());
    for (a, b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 1.0 / 255.0);
    }
}

#[test]
fn byte_level_files() {
    let mut white = b"P6 1 1 255\n".to_vec();
    white.extend_from_slice(&[0xFF; 3]);
    assert_eq!(decode_ppm(&white, "w").unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut gray = b"P5\n2 2\n255\n".to_vec();
    gray.extend_from_slice(&[0, 1, 255, 1]);
    let l = decode_pgm(&gray, "g").unwrap();
    assert_eq!(l, LabelMap::new(2, 2, vec![0, 1, 255, 1]).unwrap());
    assert_eq!(decode_pgm(&encode_pgm(&l), "g").unwrap(), l);

    let truncated = &white[..white.len() - 1];
    match decode_ppm(truncated, "t") {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, truncated.len()),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(decode_ppm(b"P3 1 1 255\n\0\0\0", "m"), Err(Error::Parse { .. })));
    assert!(matches!(decode_ppm(b"P6 1 1 65535\n\0\0\0\0\0\0", "m"), Err(Error::Parse { .. })));
}

#[test]
fn manifest_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let written = gen_dataset(&SceneSpec::benchmark(), 3, 9, dir.path()).unwrap();
    let mpath = dir.path().join("manifest.txt");
    let loaded = load_manifest(&mpath).unwrap();
    assert_eq!(loaded, written);
    assert_eq!(DatasetManifest::parse(&loaded.to_text(), dir.path()).unwrap(), loaded);
    let split = loaded.split().unwrap();
    assert_eq!(split.unseen.len(), 2);

    let text = std::fs::read_to_string(&mpath).unwrap();
    let overlap = text.replace("unseen=4,5", "unseen=3,4,5");
    match DatasetManifest::parse(&overlap, dir.path()).and_then(|m| {
        std::fs::write(&mpath, m.to_text()).unwrap();
        load_manifest(&mpath)
    }) {
        Err(Error::Manifest { field, .. }) => assert!(field == "seen" || field == "unseen"),
        other => panic!("expected a manifest error, got {other:?}"),
    }
    std::fs::write(&mpath, &text).unwrap();

    std::fs::remove_file(dir.path().join("labels/0001.pgm")).unwrap();
    match load_manifest(&mpath) {
        Err(Error::Manifest { field, msg }) => {
            assert_eq!(field, "entries");
            assert!(msg.contains("0001.pgm"), "{msg}");
        }
        other => panic!("expected a manifest error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn label_files_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let data: Vec<u8> = (0..h * w).map(|_| r.random()).collect();
        let l = LabelMap::new(h, w, data).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&l), "p").unwrap(), l);
    }
}
