use std::time::Instant;
use qwb_core::model::dataset::{synthetic_shapes, Split};
use qwb_core::model::load_model;
use qwb_core::quant::{integer_infer, quantize_model};

#[test]
fn profile_paths() {
    let model = load_model(std::path::Path::new("/tmp/qwbtest/model.qwbm")).unwrap();
    let data = synthetic_shapes(64, 10, 16, 3, 0.06, 5, Split::Test).unwrap();
    let calib = data.take(16, Split::Calibration);

    let t = Instant::now();
    for img in &data.images {
        let _ = model.forward(img).unwrap();
    }
    println!("float forward: {:?}/64 = {:?} each", t.elapsed(), t.elapsed() / 64);

    for bits in [8u8, 16] {
        let qm = quantize_model(&model, &calib, bits).unwrap();
        let t = Instant::now();
        for img in &data.images {
            let _ = integer_infer(&qm, img).unwrap();
        }
        println!("int{bits} infer: {:?}/64 = {:?} each", t.elapsed(), t.elapsed() / 64);
    }

    let t = Instant::now();
    let (_, g) = model.loss_and_gradients(&data.images[0], 0).unwrap();
    println!("loss+grad: {:?} ({} param tensors)", t.elapsed(), g.params.len());
}
