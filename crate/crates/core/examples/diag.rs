use dcls_core::toy2d::{run_toy2d, Toy2dConfig};
fn main() {
    let cfg = Toy2dConfig::desk_scale(7, 1);
    let r = run_toy2d::<f32>(&cfg).unwrap();
    for row in &r.rows {
        println!("epoch {} loss {:.4} acc {:.3} vp {:.4} sigma {:.3}", row.epoch, row.loss, row.accuracy, row.position_speed, row.mean_sigma);
    }
}
