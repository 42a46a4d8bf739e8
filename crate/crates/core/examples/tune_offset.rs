use uninet::data::gen_offset_data;
use uninet::train::{train_offset_task, OffsetRunConfig};

fn main() {
    let data = gen_offset_data::<f64>(2048, 8, 4, 0.5, 0.05, 42).unwrap();
    let (m, gl) = data.grid_search_shared_floor(-1.0, 1.0, 2000);
    println!("grid floor     = {:.12} at m = {:.6}", gl, m);
    let cfg = OffsetRunConfig { steps: 2000, ..Default::default() };
    let imp = train_offset_task(&data, true, &cfg).unwrap();
    let base = train_offset_task(&data, false, &cfg).unwrap();
    println!("implicit final = {:.12}  limit {:.12}  ok={}", imp.final_loss, 1.05 * data.implicit_floor(), imp.final_loss <= 1.05 * data.implicit_floor());
    println!("baseline final = {:.12}  floor {:.12}  ok={}", base.final_loss, data.baseline_floor(), base.final_loss >= data.baseline_floor());
    println!("implicit < baseline: {}", imp.final_loss < base.final_loss);
    // plateau means over last 100 steps
    let tail = |v: &[f64]| v[v.len()-100..].iter().sum::<f64>() / 100.0;
    println!("plateaus: implicit {:.10} baseline {:.10}", tail(&imp.losses), tail(&base.losses));
}
