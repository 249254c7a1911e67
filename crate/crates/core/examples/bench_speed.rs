use std::time::Instant;
use unlab_core::model::*;
use unlab_core::tensor::Tape;

fn main() {
    let cfg = ModelConfig { vocab_size: 128, init_seed: 1, ..Default::default() };
    let snap = ModelSnapshot::init(cfg).unwrap();
    let layout = ParamLayout::of(&snap.config);
    let x: Vec<u32> = vec![1, 2, 3, 4, 5];
    let y: Vec<u32> = vec![6, 7];

    // forward only
    let t0 = Instant::now();
    let n = 50;
    for _ in 0..n { let _ = eval_logits(&snap, &[1,2,3,4,5,6,7]).unwrap(); }
    println!("eval_logits (seq 7): {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);

    // forward+backward
    let t0 = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let params = ParamVars::insert(&mut tape, &snap, true).unwrap();
        let (lp, _) = seq_logprob_var(&mut tape, &params, &snap.config, &x, &y).unwrap();
        tape.backward(lp).unwrap();
        let _ = params.grads_flat(&tape, &layout);
    }
    println!("fwd+bwd+extract (seq 7): {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);

    let pool: Vec<(Vec<u32>, Vec<u32>)> = (0..400).map(|i| (vec![1, (i%100) as u32, ((i/100)*7) as u32 % 128, 9, 3], vec![(i%97) as u32, 5])).collect();
    let t0 = Instant::now();
    let _ = unlab_core::model::pretrain(&snap, &pool, &PretrainSettings{max_steps: 20, eval_every: 100, ..Default::default()}).unwrap();
    println!("pretrain 20 steps batch16: {:.1} ms/step", t0.elapsed().as_secs_f64()*1000.0/20.0);
}
