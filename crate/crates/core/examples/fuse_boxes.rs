//! Weighted boxes fusion of three detectors' outputs on one slice.
//!
//!     cargo run --example fuse_boxes

use lesion_selftrain::fusion::nms;
use lesion_selftrain::{weighted_boxes_fusion, BBox, Detection, FusionConfig, LesionTag};

fn det(c: [f64; 4], tag: LesionTag, score: f64, model: &str) -> Detection {
    Detection::new(BBox::new(c[0], c[1], c[2], c[3]).unwrap(), tag, score).with_model(model)
}

fn main() -> lesion_selftrain::Result<()> {
    let models = vec![
        vec![
            det([100.0, 120.0, 140.0, 160.0], LesionTag::Liver, 0.92, "epoch3"),
            det([300.0, 310.0, 330.0, 335.0], LesionTag::Lung, 0.40, "epoch3"),
        ],
        vec![
            det([103.0, 118.0, 144.0, 158.0], LesionTag::Liver, 0.81, "epoch4"),
            // same place, different tag: never fused with the liver box
            det([101.0, 121.0, 141.0, 161.0], LesionTag::Kidney, 0.35, "epoch4"),
        ],
        vec![det([98.0, 122.0, 139.0, 163.0], LesionTag::Liver, 0.88, "epoch5")],
    ];

    let cfg = FusionConfig::default().with_model_count(models.len());
    println!("WBF (iou {}, {} models):", cfg.iou_threshold, cfg.model_count);
    for d in weighted_boxes_fusion(&models, &cfg)? {
        let c = d.bbox.coords();
        println!(
            "  {:12} {:.3}  [{:.1}, {:.1}, {:.1}, {:.1}]",
            d.tag.as_str(),
            d.score,
            c[0],
            c[1],
            c[2],
            c[3]
        );
    }

    // NMS keeps one member box instead of averaging
    let flat: Vec<Detection> = models.into_iter().flatten().collect();
    println!("NMS:");
    for d in nms(&flat, 0.5) {
        println!("  {:12} {:.3}  from {}", d.tag.as_str(), d.score, d.model_id);
    }
    Ok(())
}
