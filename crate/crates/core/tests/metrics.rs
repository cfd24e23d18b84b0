mod common;

use awmf_core::metrics::*;
use awmf_core::pyramid::{decode_pnm, encode_pnm, LabelMap};
use common::*;

#[test]
fn confusion_hand_count_and_scores() {
    let cm = confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!([cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)], [1, 1, 0, 2]);
    assert_eq!(op_accuracy(&cm), 3.0 / 4.0);
    assert_eq!(pc_accuracy(&cm), 5.0 / 6.0);
    assert_eq!(miou(&cm), 7.0 / 12.0);
}

#[test]
fn confusion_trivial_cases() {
    let gt = [0u8, 2, 1, 2, 0];
    let cm = confusion(&gt, &gt, 3).unwrap();
    for a in 0..3 {
        for b in 0..3 {
            assert_eq!(cm.get(a, b) > 0, a == b);
        }
    }
    assert_eq!((op_accuracy(&cm), pc_accuracy(&cm), miou(&cm)), (1.0, 1.0, 1.0));
    let cm = confusion(&[1, 1], &[255, 255], 2).unwrap();
    assert_eq!(cm.total(), 0);
}

#[test]
fn confusion_rejects_mismatch_and_bad_labels() {
    assert!(confusion(&[0, 1], &[0], 2).is_err());
    assert!(confusion(&[0, 3], &[0, 1], 2).is_err());
}

#[test]
fn absent_class_is_left_out_of_means() {
    // class 2 never appears in truth or prediction
    let cm = confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], 3).unwrap();
    let d = miou_detail(&cm);
    assert_eq!(d.effective_classes, 2);
    assert_eq!(d.per_class[2], None);
    assert_eq!(d.value, 7.0 / 12.0);
}

#[test]
fn counts_and_scores_match_oracle_on_random_maps() {
    let mut r = rng(21);
    for _ in 0..100 {
        let m = 2 + rand_labels(&mut r, 4, 1, false)[0] as usize;
        let gt = rand_labels(&mut r, m, 64, true);
        let pred = rand_labels(&mut r, m, 64, false);
        let cm = confusion(&pred, &gt, m).unwrap();
        let oracle = confusion_oracle(&pred, &gt, m);
        for a in 0..m {
            for b in 0..m {
                assert_eq!(cm.get(a, b), oracle[a][b]);
            }
        }
        let (op, pc, iou) = scores_oracle(&oracle);
        assert!((op_accuracy(&cm) - op).abs() <= 1e-12);
        assert!((pc_accuracy(&cm) - pc).abs() <= 1e-12);
        assert!((miou(&cm) - iou).abs() <= 1e-12);
        assert!(miou(&cm) <= pc_accuracy(&cm) + 1e-12);
    }
}

#[test]
fn scores_ignore_pixel_order() {
    let mut r = rng(8);
    let gt = rand_labels(&mut r, 3, 40, true);
    let pred = rand_labels(&mut r, 3, 40, false);
    let a = confusion(&pred, &gt, 3).unwrap();
    let rev = |v: &[u8]| v.iter().rev().copied().collect::<Vec<_>>();
    let b = confusion(&rev(&pred), &rev(&gt), 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn merged_matrices_add() {
    let mut a = confusion(&[0, 1], &[0, 0], 2).unwrap();
    let b = confusion(&[1, 1], &[1, 0], 2).unwrap();
    a.merge(&b).unwrap();
    assert_eq!(a, confusion(&[0, 1, 1, 1], &[0, 0, 1, 0], 2).unwrap());
}

#[test]
fn agreement_hand_enumeration() {
    let gt = [0u8, 0, 0, 0];
    let e1 = [0u8, 0, 1, 1];
    let e2 = [1u8, 0, 0, 1];
    let e3 = [1u8, 1, 0, 0];
    let t = agreement([&e1, &e2, &e3], &gt, 2).unwrap();
    assert_eq!(t.union_rate(), 1.0);
    assert_eq!(t.intersection_rate(), 0.0);
    assert_eq!(t.pair_rate(1, 2), 0.25);
    assert_eq!(t.pair_rate(2, 3), 0.25);
    assert_eq!(t.pair_rate(1, 3), 0.0);
    assert_eq!(t.expert_rate(1), 0.5);
}

#[test]
fn agreement_all_correct_and_partition() {
    let gt = [0u8, 1, 2, 255];
    let t = agreement([&gt, &gt, &gt], &gt, 3).unwrap();
    assert_eq!(t.intersection_rate(), 1.0);
    assert_eq!(t.subset_rates()[1..7].iter().sum::<f64>(), 0.0);

    let mut r = rng(4);
    for _ in 0..20 {
        let gt = rand_labels(&mut r, 3, 50, true);
        let p: Vec<Vec<u8>> = (0..3).map(|_| rand_labels(&mut r, 3, 50, false)).collect();
        let t = agreement([&p[0], &p[1], &p[2]], &gt, 3).unwrap();
        let counted = gt.iter().filter(|&&g| g != 255).count() as u64;
        assert_eq!(t.total(), counted);
        assert!((t.subset_rates().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for k in 1..=3 {
            assert!(t.union_rate() >= t.expert_rate(k));
            assert!(t.intersection_rate() <= t.expert_rate(k));
        }
        assert!((t.union_rate() - (1.0 - t.subset_rates()[0])).abs() <= 1e-12);
        let per_class: u64 = t.per_class.iter().flatten().sum();
        assert_eq!(per_class, counted);
    }
}

#[test]
fn stitching_tiles_and_rejects_overlap() {
    let quad = |row, col, c| PatchMask {
        row,
        col,
        size: 2,
        labels: vec![c; 4],
    };
    let m = stitch_masks(&[quad(0, 0, 0), quad(0, 2, 1), quad(2, 0, 2), quad(2, 2, 3)], 4, 4).unwrap();
    assert_eq!(m.data, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    let single = stitch_masks(&[quad(0, 0, 1)], 2, 2).unwrap();
    assert_eq!(single.data, vec![1; 4]);
    let partial = stitch_masks(&[quad(0, 0, 1)], 3, 2).unwrap();
    assert_eq!(partial.data, vec![1, 1, 255, 1, 1, 255]);
    assert!(stitch_masks(&[quad(0, 0, 0), quad(1, 1, 1)], 4, 4).is_err());
    assert!(stitch_masks(&[quad(3, 3, 0)], 4, 4).is_err());
}

#[test]
fn rendering_is_invertible_and_ignore_is_black() {
    let palette = Palette::default();
    let labels = LabelMap {
        width: 3,
        height: 2,
        data: vec![0, 1, 2, 3, 4, 255],
    };
    let img = render_mask(&labels, &palette).unwrap();
    assert_eq!(&img.data[15..18], &[0, 0, 0]);
    let (_, _, channels, back) = decode_pnm(&encode_pnm(img.width, img.height, 3, &img.data)).unwrap();
    assert_eq!(channels, 3);
    let inverse: Vec<u8> = back
        .chunks(3)
        .map(|px| {
            palette
                .colors
                .iter()
                .position(|c| c == px)
                .map(|c| c as u8)
                .unwrap_or(255)
        })
        .collect();
    assert_eq!(inverse, labels.data);

    let uniform = render_mask(&LabelMap::new(2, 2, 1), &palette).unwrap();
    assert!(uniform.data.chunks(3).all(|px| px == palette.colors[1]));
    let short = Palette::parse("1,2,3").unwrap();
    assert!(render_mask(&labels, &short).is_err());
}

#[test]
fn palette_parses_its_own_config_string() {
    let p = Palette::default();
    assert_eq!(Palette::parse(&p.to_config_string()).unwrap(), p);
    assert!(Palette::parse("1,2").is_err());
    assert!(Palette::parse("1,2,300").is_err());
}

#[test]
fn cascade_merge_matches_mask_oracle() {
    let sub = LabelMap {
        width: 2,
        height: 2,
        data: vec![1, 2, 3, 0],
    };
    let normal = merge_cascade(&LabelMap::new(2, 2, 0), &sub).unwrap();
    assert_eq!(normal.data, vec![0; 4]);
    let tumour = merge_cascade(&LabelMap::new(2, 2, 1), &sub).unwrap();
    assert_eq!(tumour, sub);

    let mut r = rng(9);
    for _ in 0..20 {
        let two = rand_labels(&mut r, 2, 30, true);
        let s = rand_labels(&mut r, 5, 30, true);
        let mk = |d: &Vec<u8>| LabelMap {
            width: 5,
            height: 6,
            data: d.clone(),
        };
        let got = merge_cascade(&mk(&two), &mk(&s)).unwrap();
        for i in 0..30 {
            let want = match two[i] {
                0 => 0,
                255 => 255,
                _ => s[i],
            };
            assert_eq!(got.data[i], want);
        }
    }
    assert!(merge_cascade(&LabelMap::new(2, 2, 0), &LabelMap::new(3, 2, 0)).is_err());
}

#[test]
fn csv_reports_have_expected_columns() {
    let cm = confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    let csv = metrics_csv(&[ModelScores {
        model: "adaptive".into(),
        cm,
    }]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,class,tp,fp,fn,pc,iou,op");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("adaptive,all,3,1,1,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 8));

    let t = agreement([&[0u8, 1], &[0, 0], &[1, 1]], &[0, 1], 2).unwrap();
    let csv = agreement_csv(&[("pretrained".into(), t)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split(',').count() == 13));
}
