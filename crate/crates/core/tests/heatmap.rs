mod support;
use support::*;

use nrkd_core::features::{BuiltinPlugin, FeaturePlugin};
use nrkd_core::heatmap::{build_triplet_heatmaps, render_peaks, HeatmapConfig};
use nrkd_core::synth::{triplet_for_index, SynthConfig};

#[test]
fn builder_matches_dense_reference() {
    let sc = SynthConfig { count: 12, width: 64, height: 64, ..Default::default() };
    let cfg = HeatmapConfig { budget: Some(20), ..Default::default() };
    let plugin = BuiltinPlugin;
    let mut peaks = 0;
    for i in 0..sc.count {
        let t = triplet_for_index(&sc, &[], 300 + i as u64).unwrap();
        let da = plugin.detect_and_describe(&t.anchor, 20).unwrap();
        let db = plugin.detect_and_describe(&t.warped_1, 20).unwrap();
        let dbp = plugin.detect_and_describe(&t.warped_2, 20).unwrap();
        let (ma, mb, mbp) = gt_reference(&t, &da, &db, &dbp, cfg.ratio, cfg.tolerance);
        let Ok(hm) = build_triplet_heatmaps(&t, &plugin, &cfg) else {
            assert!(mb.iter().all(|&v| v == 0.0) || mbp.iter().all(|&v| v == 0.0));
            continue;
        };
        assert_eq!(dense_peaks(&hm.m_a.peaks, 64, 64), ma, "triplet {i}");
        assert_eq!(dense_peaks(&hm.m_b.peaks, 64, 64), mb, "triplet {i}");
        assert_eq!(dense_peaks(&hm.m_bp.peaks, 64, 64), mbp, "triplet {i}");
        for m in [&hm.m_a, &hm.m_b, &hm.m_bp] {
            assert!(m.peaks.iter().all(|p| [0.25, 0.5, 0.75, 1.0].contains(&p.weight)));
            let r = render_peaks(&m.peaks, 64, 64);
            assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            peaks += m.peaks.len();
        }
    }
    assert!(peaks > 0);
}
