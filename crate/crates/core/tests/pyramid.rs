mod common;

use awmf_core::pyramid::*;
use awmf_core::Error;
use common::*;
use rand::Rng;

fn random_slide(w: usize, h: usize, channels: usize, seed: u64) -> Slide {
    let mut r = rng(seed);
    let image = Image {
        width: w,
        height: h,
        channels,
        data: (0..w * h * channels).map(|_| r.random_range(0..=255u8)).collect(),
    };
    let labels = LabelMap {
        width: w,
        height: h,
        data: (0..w * h).map(|_| r.random_range(0..3u8)).collect(),
    };
    Slide::new(format!("s{seed}"), image, labels).unwrap()
}

/// Reflect-101 written out by repeated folding.
fn fold(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

#[test]
fn tiling_counts_and_order() {
    let s = random_slide(64, 48, 1, 1);
    let t = extract_triplets(&s, 16, 16).unwrap();
    assert_eq!(t.len(), 12);
    assert_eq!((t[0].row, t[0].col), (0, 0));
    assert_eq!((t[1].row, t[1].col), (0, 16));
    assert_eq!((t[4].row, t[4].col), (16, 0));
    assert_eq!(extract_triplets(&s, 16, 8).unwrap().len(), 7 * 5);
    assert!(extract_triplets(&s, 12, 12).is_err());
    assert!(extract_triplets(&s, 16, 0).is_err());
    assert!(extract_triplets(&random_slide(8, 8, 1, 2), 16, 16).is_err());
}

#[test]
fn constant_slide_gives_constant_fields() {
    let s = Slide::new(
        "flat",
        Image {
            width: 40,
            height: 40,
            channels: 3,
            data: vec![51; 40 * 40 * 3],
        },
        LabelMap::new(40, 40, 2),
    )
    .unwrap();
    for t in extract_triplets(&s, 8, 8).unwrap() {
        for k in 0..3 {
            assert_eq!(t.x[k].shape(), &[3, 8, 8]);
            assert!(t.x[k].data().iter().all(|&v| v == 0.2));
            assert!(t.t[k].iter().all(|&l| l == 2));
        }
    }
}

/// Every field pixel is the mean of its mirrored `f x f` source block; the
/// label is the source pixel at offset `f / 2`.
#[test]
fn fields_match_registration_oracle() {
    let s = random_slide(40, 24, 2, 3);
    let w = 8;
    for t in extract_triplets(&s, w, 8).unwrap() {
        for (k, f) in [1usize, 2, 4].into_iter().enumerate() {
            let top = t.row as isize - ((f - 1) * w / 2) as isize;
            let left = t.col as isize - ((f - 1) * w / 2) as isize;
            for oy in 0..w {
                for ox in 0..w {
                    let y0 = top + (oy * f) as isize;
                    let x0 = left + (ox * f) as isize;
                    for c in 0..2 {
                        let mut sum = 0u32;
                        for dy in 0..f as isize {
                            for dx in 0..f as isize {
                                sum += s.image.at(fold(y0 + dy, 24), fold(x0 + dx, 40), c) as u32;
                            }
                        }
                        let want = sum as f64 / (255.0 * (f * f) as f64);
                        assert_eq!(t.x[k].data()[(c * w + oy) * w + ox], want);
                    }
                    let half = (f / 2) as isize;
                    let lab = s.labels.at(fold(y0 + half, 24), fold(x0 + half, 40));
                    assert_eq!(t.t[k][oy * w + ox], lab);
                }
            }
        }
    }
}

/// The target region sits at the centre of each wider field: averaging the
/// full-resolution field reproduces the central square exactly.
#[test]
fn fields_are_concentric() {
    let s = random_slide(64, 64, 1, 4);
    let w = 16;
    for t in extract_triplets(&s, w, 16).unwrap() {
        for (k, f) in [(1usize, 2usize), (2, 4)] {
            let side = w / f;
            let off = (w - side) / 2;
            for y in 0..side {
                for x in 0..side {
                    let mut sum = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            sum += t.x[0].data()[(y * f + dy) * w + x * f + dx] * 255.0;
                        }
                    }
                    let got = t.x[k].data()[(off + y) * w + off + x] * 255.0 * (f * f) as f64;
                    assert!((got - sum).abs() < 1e-9);
                    let half = f / 2;
                    assert_eq!(
                        t.t[k][(off + y) * w + off + x],
                        t.t[0][(y * f + half) * w + x * f + half]
                    );
                }
            }
        }
    }
}

#[test]
fn flips_are_involutions_and_keep_rasters_aligned() {
    let s = random_slide(32, 32, 1, 5);
    let t = &extract_triplets(&s, 8, 8).unwrap()[5];
    for (h, v) in [(true, false), (false, true), (true, true)] {
        let f = flip(t, h, v);
        assert_eq!(&flip(&f, h, v), t);
        for k in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let (sy, sx) = (if v { 7 - y } else { y }, if h { 7 - x } else { x });
                    assert_eq!(f.x[k].data()[y * 8 + x], t.x[k].data()[sy * 8 + sx]);
                    assert_eq!(f.t[k][y * 8 + x], t.t[k][sy * 8 + sx]);
                }
            }
        }
    }
    assert_eq!(flip_augment(t, 3), flip_augment(t, 3));
}

#[test]
fn split_is_disjoint_seeded_and_ordered() {
    let s = random_slide(64, 64, 1, 6);
    let all = extract_triplets(&s, 8, 8).unwrap();
    let a = split_dataset(all.clone(), vec![], 0.2, 9).unwrap();
    let b = split_dataset(all.clone(), vec![], 0.2, 9).unwrap();
    let c = split_dataset(all.clone(), vec![], 0.2, 10).unwrap();
    assert_eq!(a.weighting.len(), 13);
    assert_eq!(a.train.len(), 51);
    assert_eq!(a.weighting, b.weighting);
    assert_ne!(a.weighting, c.weighting);
    for t in &a.weighting {
        assert!(a.train.iter().all(|u| u.region() != t.region()));
    }
    let pos = |t: &PatchTriplet| all.iter().position(|u| u.region() == t.region()).unwrap();
    assert!(a.train.windows(2).all(|p| pos(&p[0]) < pos(&p[1])));
    assert!(split_dataset(all.clone(), vec![], 0.0, 1).is_err());
    assert!(split_dataset(all[..1].to_vec(), vec![], 0.2, 1).is_err());
}

#[test]
fn pnm_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let s = random_slide(5, 3, 3, 7);
    save_image(dir.path().join("a/b.ppm"), &s.image).unwrap();
    assert_eq!(load_image(dir.path().join("a/b.ppm")).unwrap(), s.image);
    save_labels(dir.path().join("l.pgm"), &s.labels).unwrap();
    assert_eq!(load_labels(dir.path().join("l.pgm")).unwrap(), s.labels);
    assert!(load_labels(dir.path().join("a/b.ppm")).is_err());

    let commented = b"P5\n# made by hand\n2 1\n# another\n255\n\x07\x09";
    assert_eq!(decode_pnm(commented).unwrap(), (2, 1, 1, vec![7, 9]));
    assert!(matches!(
        decode_pnm(b"P5\n2 2\n255\n\x01\x02"),
        Err(Error::UnexpectedEof)
    ));
    assert!(matches!(decode_pnm(b"P3\n1 1\n255\n1"), Err(Error::MalformedHeader(_))));
    assert!(matches!(
        decode_pnm(b"P5\n1 1\n65535\n\x00\x00"),
        Err(Error::MalformedHeader(_))
    ));
    assert!(matches!(decode_pnm(b"P5\n2"), Err(Error::MalformedHeader(_))));
    assert!(matches!(
        decode_pnm(format!("P5\n{} 1\n255\n", MAX_EXTENT + 1).as_bytes()),
        Err(Error::ExtentOverflow { .. })
    ));
}

#[test]
fn manifest_round_trip_and_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut entries = vec![];
    for (i, split) in [SplitTag::Train, SplitTag::Test].into_iter().enumerate() {
        let s = random_slide(16, 16, 1, i as u64);
        let img = dir.path().join(format!("slide{i}.pgm"));
        let lab = dir.path().join(format!("slide{i}_labels.pgm"));
        save_image(&img, &s.image).unwrap();
        save_labels(&lab, &s.labels).unwrap();
        entries.push(ManifestEntry {
            slide: img,
            labels: lab,
            split,
        });
    }
    let path = dir.path().join("manifest.txt");
    write_manifest(&path, &entries).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), entries);
    let slides = load_manifest_slides(&path).unwrap();
    assert_eq!(slides[0].0.id, "slide0");
    assert_eq!(slides[1].1, SplitTag::Test);

    let rel = dir.path().join("rel.txt");
    std::fs::write(
        &rel,
        "# comment\n\nslide=slide0.pgm labels=slide0_labels.pgm split=train\n",
    )
    .unwrap();
    assert_eq!(read_manifest(&rel).unwrap()[0].slide, dir.path().join("slide0.pgm"));

    std::fs::write(&rel, "slide=a labels=b split=train\nslide=a labels=b split=dev\n").unwrap();
    match read_manifest(&rel) {
        Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a manifest error, got {other:?}"),
    }
}

#[test]
fn synthetic_slides_are_deterministic_and_near_target_areas() {
    for mode in [SynthMode::TwoClass, SynthMode::FourClass] {
        let cfg = SynthConfig::new(mode);
        let a = synth_generate(&cfg, 5, "a").unwrap();
        let b = synth_generate(&cfg, 5, "a").unwrap();
        let c = synth_generate(&cfg, 6, "a").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, c.image);
        for seed in 0..16 {
            let s = synth_generate(&cfg, seed, "s").unwrap();
            let areas = class_areas(&s.labels, mode.classes());
            for (got, want) in areas.iter().zip(&cfg.ratios) {
                assert!((got - want).abs() <= 0.05, "{areas:?} vs {:?}", cfg.ratios);
            }
        }
    }
    assert_eq!(SynthMode::TwoClass.default_ratios(), vec![0.67, 0.33]);
    let colour = SynthConfig {
        color: true,
        ..SynthConfig::new(SynthMode::FourClass)
    };
    assert_eq!(synth_generate(&colour, 1, "c").unwrap().image.channels, 3);
    let bad = SynthConfig {
        ratios: vec![0.5, 0.6],
        ..SynthConfig::new(SynthMode::TwoClass)
    };
    assert!(matches!(synth_generate(&bad, 1, "x"), Err(Error::Config(_))));
}

/// The period-2 texture separates at full resolution and vanishes after 2x
/// averaging.
#[test]
fn fine_cue_is_only_visible_at_full_resolution() {
    let cfg = SynthConfig {
        noise: 0.0,
        mid_amplitude: 0.0,
        dot_amplitude: 0.0,
        ..SynthConfig::new(SynthMode::FourClass)
    };
    let s = synth_generate(&cfg, 3, "f").unwrap();
    let mut stats = [[vec![], vec![]], [vec![], vec![]]];
    for t in extract_triplets(&s, 16, 16).unwrap() {
        let fine = t.t[0][0] % 2;
        if t.t[0].iter().any(|&l| l % 2 != fine) || t.t[1].iter().any(|&l| l % 2 != fine) {
            continue;
        }
        for k in 0..2 {
            stats[k][fine as usize].push(fine_cue_statistic(t.x[k].data(), 16, 16));
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!stats[0][0].is_empty() && !stats[0][1].is_empty());
    let gap_full = mean(&stats[0][0]) - mean(&stats[0][1]);
    let gap_half = mean(&stats[1][0]) - mean(&stats[1][1]);
    assert!(gap_full > 0.15, "full-resolution gap {gap_full}");
    assert!(gap_half.abs() < 0.02, "half-resolution gap {gap_half}");
}

/// With default settings the fine factor is lost at the widest field: on 100
/// single-factor patches the mean gap is under half a pooled std.
#[test]
fn fine_cue_is_destroyed_after_quarter_resolution() {
    let cfg = SynthConfig::new(SynthMode::FourClass);
    let mut stats: [Vec<f64>; 2] = [vec![], vec![]];
    let mut seed = 0;
    while stats[0].len() + stats[1].len() < 100 {
        let s = synth_generate(&cfg, 500 + seed, "q").unwrap();
        seed += 1;
        for t in extract_triplets(&s, 32, 32).unwrap() {
            let fine = t.t[2][0] % 2;
            if t.t[2].iter().any(|&l| l % 2 != fine) || stats[0].len() + stats[1].len() >= 100 {
                continue;
            }
            stats[fine as usize].push(fine_cue_statistic(t.x[2].data(), 32, 32));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (a, b) = (&stats[0], &stats[1]);
    assert!(a.len() > 5 && b.len() > 5, "{} / {} patches", a.len(), b.len());
    let pooled =
        (((a.len() - 1) as f64 * var(a) + (b.len() - 1) as f64 * var(b)) / (a.len() + b.len() - 2) as f64).sqrt();
    let gap = (mean(a) - mean(b)).abs();
    assert!(gap < 0.5 * pooled, "gap {gap} vs pooled std {pooled}");

    // the middle field still carries it
    let s = synth_generate(
        &SynthConfig {
            noise: 0.0,
            dot_amplitude: 0.0,
            ..cfg
        },
        3,
        "m",
    )
    .unwrap();
    let mut mid: [Vec<f64>; 2] = [vec![], vec![]];
    for t in extract_triplets(&s, 16, 16).unwrap() {
        let fine = t.t[1][0] % 2;
        if t.t[1].iter().all(|&l| l % 2 == fine) {
            mid[fine as usize].push(fine_cue_statistic(t.x[1].data(), 16, 16));
        }
    }
    assert!(mean(&mid[0]) - mean(&mid[1]) > 0.05);
}
