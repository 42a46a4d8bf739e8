use uninet::data::{gen_detection_data, kmeans_anchors};
use uninet::network::{build_toy_unified_net, NetConfig, TaskSet};
use uninet::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let w: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let wb: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let wo: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let wc: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.5);

    let n_data: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(256);
    let data = gen_detection_data(n_data, 64, 7);
    let eval = gen_detection_data(64, 64, 8);
    let mut cfg = NetConfig {
        image_size: 64,
        stage_widths: vec![8, 16, 2*w, 2*w],
        blocks_per_stage: 1,
        neck_width: w,
        head_width: w,
        num_scales: 3,
        seed: 1,
        tasks: TaskSet { detection: true, classification: false, embedding: false },
        attachments: vec![],
        ..NetConfig::default()
    };
    cfg.anchors = Some(kmeans_anchors(&data, 3, 3, 2));
    println!("anchors: {:?}", cfg.anchors);
    let mut net = build_toy_unified_net::<f64>(&cfg).unwrap();
    let tc = TrainConfig { steps, learning_rate: lr, batch_size: batch, seed: 3, eval_interval: 0, box_weight: wb, obj_weight: wo, cls_weight: wc, ..Default::default() };
    let t0 = std::time::Instant::now();
    let log = train(&mut net, &data, Some(&eval), &tc).unwrap();
    let sm = log.smoothed_total(50);
    println!("steps={} lr={} wall={:?}", steps, lr, t0.elapsed());
    for i in (49..sm.len()).step_by(100) {
        println!("  step {:4}  smoothed {:.4}", i + 1, sm[i]);
    }
    println!("  final smoothed {:.4}  baseline(50) {:.4}  reduction {:.3}", sm.last().unwrap(), sm[49], log.smoothed_reduction(50));
    if let Some(e) = log.evals.last() {
        println!("  eval precision {:.3} recall {:.3}", e.precision, e.recall);
    }
    let tail = &log.steps[log.steps.len().saturating_sub(50)..];
    let avg = |f: &dyn Fn(&uninet::train::StepRecord) -> f64| tail.iter().map(|r| f(r)).sum::<f64>() / tail.len() as f64;
    println!("  tail parts: box {:.4} obj {:.4} cls {:.4}", avg(&|r| r.det_box), avg(&|r| r.det_obj), avg(&|r| r.det_cls));
    let head = &log.steps[..50.min(log.steps.len())];
    let avg_h = |f: &dyn Fn(&uninet::train::StepRecord) -> f64| head.iter().map(|r| f(r)).sum::<f64>() / head.len() as f64;
    println!("  head parts: box {:.4} obj {:.4} cls {:.4}", avg_h(&|r| r.det_box), avg_h(&|r| r.det_obj), avg_h(&|r| r.det_cls));
}
