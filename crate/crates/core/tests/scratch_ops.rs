//! Temporary per-op timing probes.

use lverse::nn::randn;
use lverse::rng::stream_rng;
use lverse::tensor::attention::{causal_attention, masked_cross_entropy};
use lverse::tensor::Tape;
use std::time::Instant;

#[test]
#[ignore]
fn op_timings() {
    let mut rng = stream_rng(1, "b", 0);

    // fused attention at [16, 4, 1090, 32]
    let q = randn::<f32>(&[16, 4, 1090, 32], 0.3, &mut rng);
    let k = randn::<f32>(&[16, 4, 1090, 32], 0.3, &mut rng);
    let v = randn::<f32>(&[16, 4, 1090, 32], 0.3, &mut rng);
    for round in 0..2 {
        let tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone().into_dyn()),
            tape.constant(k.clone().into_dyn()),
            tape.constant(v.clone().into_dyn()),
        );
        let t0 = Instant::now();
        let ctx = causal_attention(&qv, &kv, &vv, None);
        let fwd = t0.elapsed().as_secs_f64();
        let loss = ctx.mean_all();
        let t1 = Instant::now();
        tape.backward(&loss);
        println!(
            "attention round {round}: fwd {fwd:.3}s bwd {:.3}s",
            t1.elapsed().as_secs_f64()
        );
    }

    // cross entropy at [17440, 643]
    let logits = randn::<f32>(&[17440, 643], 0.5, &mut rng);
    let targets: Vec<u32> = (0..17440).map(|i| (i % 643) as u32).collect();
    let mask: Vec<bool> = (0..17440).map(|i| i % 1090 != 1089).collect();
    for round in 0..2 {
        let tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let t0 = Instant::now();
        let loss = masked_cross_entropy(&lv, &targets, &mask);
        let fwd = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        tape.backward(&loss);
        println!(
            "cross-entropy round {round}: fwd {fwd:.3}s bwd {:.3}s",
            t1.elapsed().as_secs_f64()
        );
    }

    // layer_norm at [16, 1090, 128]
    let x = randn::<f32>(&[16, 1090, 128], 0.5, &mut rng);
    let g = randn::<f32>(&[128], 0.1, &mut rng);
    let b = randn::<f32>(&[128], 0.1, &mut rng);
    for round in 0..2 {
        let tape = Tape::new();
        let (xv, gv, bv) = (
            tape.constant(x.clone()),
            tape.constant(g.clone()),
            tape.constant(b.clone()),
        );
        let t0 = Instant::now();
        let y = xv.layer_norm(&gv, &bv, 1e-5);
        let fwd = t0.elapsed().as_secs_f64();
        let loss = y.mean_all();
        let t1 = Instant::now();
        tape.backward(&loss);
        println!(
            "layer_norm round {round}: fwd {fwd:.3}s bwd {:.3}s",
            t1.elapsed().as_secs_f64()
        );
    }

    // linear [17440,128] -> 512 and back
    let x = randn::<f32>(&[17440, 128], 0.5, &mut rng);
    let w = randn::<f32>(&[512, 128], 0.1, &mut rng);
    let bias = randn::<f32>(&[512], 0.1, &mut rng);
    for round in 0..2 {
        let tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(bias.clone()),
        );
        let t0 = Instant::now();
        let y = xv.linear(&wv, Some(&bv));
        let fwd = t0.elapsed().as_secs_f64();
        let loss = y.mean_all();
        let t1 = Instant::now();
        tape.backward(&loss);
        println!(
            "linear round {round}: fwd {fwd:.3}s bwd {:.3}s",
            t1.elapsed().as_secs_f64()
        );
    }

    // permute [16,1090,4,32] -> [16,4,1090,32]
    let x = randn::<f32>(&[16, 1090, 4, 32], 0.5, &mut rng);
    let tape = Tape::new();
    let xv = tape.constant(x);
    let t0 = Instant::now();
    for _ in 0..24 {
        let _ = xv.permute(&[0, 2, 1, 3]);
    }
    println!("24 permutes: {:.3}s", t0.elapsed().as_secs_f64());
}
