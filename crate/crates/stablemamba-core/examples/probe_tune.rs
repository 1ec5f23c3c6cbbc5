//! Scratch harness for tuning the selective-copy probe. Not part of the
//! shipped surface; run with `cargo run --example probe_tune -- <mode>`.

use stablemamba_core::check::{finite_diff_check, FiniteDiffConfig};
use stablemamba_core::synth::*;
use stablemamba_core::tape::Tape;
use stablemamba_core::tensor::Tensor;

fn gradcheck() {
    // f64 FD check of the full sequence model on a tiny instance.
    use stablemamba_core::blocks::MambaBlockParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let vocab = 6usize;
    let d = 8usize;
    let n_out = 4usize;
    let embed = Tensor::<f64>::randn(&[vocab, d], 0.5, &mut rng);
    let block = MambaBlockParams::<f64>::init(d, &mut rng);
    let norm = Tensor::<f64>::ones(&[d]);
    let head_w = Tensor::<f64>::randn(&[d, n_out], 0.3, &mut rng);
    let tokens = vec![0usize, 3, 5, 1, 4, 2];
    let targets = vec![2usize, 0];

    let mut params: Vec<(String, Tensor<f64>)> = vec![("embed".into(), embed.clone())];
    block.visit("b", &mut |n, t| params.push((n, t.clone())));
    params.push(("norm".into(), norm.clone()));
    params.push(("head".into(), head_w.clone()));

    let run = |ps: &[(String, Tensor<f64>)], want_grads: bool| {
        let mut tape = Tape::new();
        let embed_v = tape.leaf(ps[0].1.clone(), want_grads);
        let mut i = 1usize;
        let mut blk = block.clone();
        blk.visit_mut("b", &mut |_, t| {
            *t = ps[i].1.clone();
            i += 1;
        });
        let mut reg = Vec::new();
        let bv = blk.bind(&mut tape, want_grads, "b", &mut reg);
        let norm_v = tape.leaf(ps[i].1.clone(), want_grads);
        let head_v = tape.leaf(ps[i + 1].1.clone(), want_grads);
        let h = tape.embed_lookup(embed_v, &tokens).unwrap();
        let h = stablemamba_core::blocks::mamba_block(&mut tape, h, &bv).unwrap();
        let h = tape
            .rms_norm(h, norm_v, stablemamba_core::blocks::RMS_EPS)
            .unwrap();
        let tail = tape
            .slice_rows(h, tokens.len() - targets.len(), targets.len())
            .unwrap();
        let logits = tape.matmul(tail, head_v).unwrap();
        let loss = tape.cross_entropy(logits, &targets, 0.0).unwrap();
        let loss = tape.scale(loss, 1.0 / 64.0).unwrap();
        let lv = tape.value(loss).data()[0];
        if !want_grads {
            return (lv, None);
        }
        tape.backward(loss).unwrap();
        let mut grads = vec![Some(tape.grad(embed_v).unwrap().clone())];
        for (_, v) in &reg {
            grads.push(Some(tape.grad(*v).unwrap().clone()));
        }
        grads.push(Some(tape.grad(norm_v).unwrap().clone()));
        grads.push(Some(tape.grad(head_v).unwrap().clone()));
        (lv, Some(grads))
    };
    let (_, grads) = run(&params, true);
    let grads = grads.unwrap();
    let report = finite_diff_check(
        &params,
        &grads,
        |ps| Ok(run(ps, false).0),
        &FiniteDiffConfig {
            max_coords_per_tensor: Some(4),
            seed: 3,
            ..FiniteDiffConfig::default()
        },
    )
    .unwrap();
    println!(
        "gradcheck passed={} n={} worst={:?}",
        report.passed(),
        report.n_checked,
        report.worst
    );
}

fn sweep() {
    for (lr, steps, marked) in [
        (1e-3, 300, 2usize),
        (2e-3, 300, 2),
        (5e-4, 300, 2),
        (1e-3, 300, 1),
    ] {
        let cfg = ProbeConfig {
            seq_len: 48,
            n_tokens: 4,
            n_marked: marked,
            d_model: 32,
            depth: 2,
            steps,
            batch_size: 4,
            lr,
            seed: 0,
            eval_sequences: 32,
        };
        let t0 = std::time::Instant::now();
        let out = train_selective_copy(&cfg).unwrap();
        let trace: Vec<String> = out
            .loss_trace
            .iter()
            .filter(|(s, _)| s % 50 == 0)
            .map(|(s, l)| format!("{s}:{l:.3}"))
            .collect();
        println!(
            "lr={lr} steps={steps} marked={marked}: acc={:.3} final_loss={:.3} [{}] ({:.1}s)",
            out.token_accuracy,
            out.final_loss,
            trace.join(" "),
            t0.elapsed().as_secs_f64()
        );
    }
}

fn time_full() {
    let cfg = ProbeConfig {
        steps: 10,
        eval_sequences: 8,
        ..ProbeConfig::default()
    };
    let t0 = std::time::Instant::now();
    let out = train_selective_copy(&cfg).unwrap();
    println!(
        "10 full-scale steps + 8 evals in {:.1}s (final loss {:.3})",
        t0.elapsed().as_secs_f64(),
        out.final_loss
    );
}

// Short full-scale runs across the marked/tokens/lr axes to find a trend.
fn grid() {
    for (marked, tokens, lr) in [
        (1usize, 4usize, 5e-4),
        (1, 4, 1e-3),
        (1, 8, 5e-4),
        (2, 4, 1e-3),
    ] {
        let cfg = ProbeConfig {
            n_marked: marked,
            n_tokens: tokens,
            steps: 150,
            batch_size: 4,
            lr,
            eval_sequences: 32,
            ..ProbeConfig::default()
        };
        let t0 = std::time::Instant::now();
        let out = train_selective_copy(&cfg).unwrap();
        let trace: Vec<String> = out
            .loss_trace
            .iter()
            .filter(|(s, _)| s % 25 == 0)
            .map(|(s, l)| format!("{s}:{l:.3}"))
            .collect();
        println!(
            "marked={marked} tokens={tokens} lr={lr}: acc={:.4} final_loss={:.3} ({:.0}s) [{}]",
            out.token_accuracy,
            out.final_loss,
            t0.elapsed().as_secs_f64(),
            trace.join(" ")
        );
    }
}

// full <marked> <steps> <batch> <lr> [tokens]
fn full(args: &[String]) {
    let cfg = ProbeConfig {
        n_marked: args[0].parse().unwrap(),
        steps: args[1].parse().unwrap(),
        batch_size: args[2].parse().unwrap(),
        lr: args[3].parse().unwrap(),
        n_tokens: args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8),
        eval_sequences: 32,
        ..ProbeConfig::default()
    };
    let t0 = std::time::Instant::now();
    let out = train_selective_copy(&cfg).unwrap();
    let trace: Vec<String> = out
        .loss_trace
        .iter()
        .filter(|(s, _)| s % 25 == 0)
        .map(|(s, l)| format!("{s}:{l:.3}"))
        .collect();
    println!(
        "marked={} steps={} batch={} lr={}: acc={:.4} final_loss={:.3} ({:.0}s)\n  [{}]",
        cfg.n_marked,
        cfg.steps,
        cfg.batch_size,
        cfg.lr,
        out.token_accuracy,
        out.final_loss,
        t0.elapsed().as_secs_f64(),
        trace.join(" ")
    );
}

// Self-contained trainer with an arbitrary per-step window schedule, so
// window policies can be tried without touching the library loop.
fn train_win(
    cfg: &ProbeConfig,
    window_at: impl Fn(usize) -> usize,
    eval_window: usize,
) -> (f64, f64, Vec<(usize, f64)>) {
    use stablemamba_core::train::{argmax, AdamW};

    let mut params = SeqModelParams::init(
        vocab_size(cfg.n_tokens),
        cfg.seq_len,
        cfg.d_model,
        cfg.depth,
        cfg.n_tokens,
        cfg.seed,
    );
    let mut opt = AdamW::new(&params.shapes());
    let mut trace = Vec::new();
    let mut final_loss = f64::NAN;
    let backward = |params: &SeqModelParams, s: &SeqSample| {
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let vars = params.bind(&mut tape, true, &mut reg);
        let logits = seq_model_forward(&mut tape, &vars, &s.tokens, s.targets.len()).unwrap();
        let loss = tape.cross_entropy(logits, &s.targets, 0.0).unwrap();
        let lv = tape.value(loss).data()[0] as f64;
        tape.backward(loss).unwrap();
        let grads: Vec<Tensor<f32>> = reg
            .iter()
            .map(|(_, v)| match tape.grad(*v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.value(*v).shape()),
            })
            .collect();
        (lv, grads)
    };
    for step in 0..cfg.steps {
        let window = window_at(step);
        let mut loss = 0.0;
        let mut grads: Vec<Tensor<f32>> = Vec::new();
        for j in 0..cfg.batch_size {
            let s = synth_selective_copy_windowed(
                cfg.seq_len,
                cfg.n_tokens,
                cfg.n_marked,
                window,
                0x5eed_0000u64 + (step * cfg.batch_size + j) as u64,
            )
            .unwrap();
            let (l, g) = backward(&params, &s);
            loss += l;
            if j == 0 {
                grads = g;
            } else {
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
            }
        }
        loss /= cfg.batch_size as f64;
        let scale = 1.0 / cfg.batch_size as f32;
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        let warm = (cfg.steps / 8).clamp(10, 50).min(cfg.steps);
        let lr = if step < warm {
            cfg.lr * (step + 1) as f64 / warm as f64
        } else {
            let span = (cfg.steps - 1 - warm).max(1);
            let p = (step - warm) as f64 / span as f64;
            let floor = cfg.lr * 0.1;
            floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        };
        let mut slots: Vec<&mut Tensor<f32>> = Vec::new();
        params.visit_mut(&mut |_, t| slots.push(t));
        opt.step(&mut slots, &grads, lr, 0.0).unwrap();
        trace.push((step, loss));
        final_loss = loss;
    }
    // Windowed eval: how well does the model do on the restricted task.
    let mut n_correct = 0usize;
    for i in 0..cfg.eval_sequences {
        let s = synth_selective_copy_windowed(
            cfg.seq_len,
            cfg.n_tokens,
            cfg.n_marked,
            eval_window,
            0xe7a1_0000_0000u64 + i as u64,
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let vars = params.bind(&mut tape, false, &mut reg);
        let logits = seq_model_forward(&mut tape, &vars, &s.tokens, s.targets.len()).unwrap();
        let lt = tape.value(logits);
        for (r, &want) in s.targets.iter().enumerate() {
            if argmax(&lt.data()[r * cfg.n_tokens..][..cfg.n_tokens]) == want {
                n_correct += 1;
            }
        }
    }
    let acc = n_correct as f64 / (cfg.eval_sequences * cfg.n_marked) as f64;
    (acc, final_loss, trace)
}

// fixedwin <window> <marked> <steps> <batch> <lr> [tokens] [d_model] [depth] [seq_len]
// — train AND eval with a constant window, to isolate which axis breaks
// learning (length vs width vs depth).
fn fixedwin(args: &[String]) {
    let window: usize = args[0].parse().unwrap();
    let cfg = ProbeConfig {
        n_marked: args[1].parse().unwrap(),
        steps: args[2].parse().unwrap(),
        batch_size: args[3].parse().unwrap(),
        lr: args[4].parse().unwrap(),
        n_tokens: args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8),
        d_model: args.get(6).map(|s| s.parse().unwrap()).unwrap_or(64),
        depth: args.get(7).map(|s| s.parse().unwrap()).unwrap_or(4),
        seq_len: args.get(8).map(|s| s.parse().unwrap()).unwrap_or(256),
        eval_sequences: 32,
        ..ProbeConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (acc, final_loss, trace) = train_win(&cfg, |_| window, window);
    let tr: Vec<String> = trace
        .iter()
        .filter(|(s, _)| s % 25 == 0)
        .map(|(s, l)| format!("{s}:{l:.3}"))
        .collect();
    println!(
        "fixedwin={} marked={} steps={} lr={} L={} D={} depth={}: windowed-acc={:.4} final_loss={:.3} ({:.0}s)\n  [{}]",
        window,
        cfg.n_marked,
        cfg.steps,
        cfg.lr,
        cfg.seq_len,
        cfg.d_model,
        cfg.depth,
        acc,
        final_loss,
        t0.elapsed().as_secs_f64(),
        tr.join(" ")
    );
}

// show <seq_len> <tokens> <marked> <window> — print one generated sample.
fn show(args: &[String]) {
    let (l, k, m, w) = (
        args[0].parse().unwrap(),
        args[1].parse().unwrap(),
        args[2].parse().unwrap(),
        args[3].parse().unwrap(),
    );
    let s = synth_selective_copy_windowed(l, k, m, w, 123).unwrap();
    println!("tokens:  {:?}", s.tokens);
    println!("targets: {:?}", s.targets);
    let blank = k;
    let data: Vec<(usize, usize)> = s
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t < blank)
        .map(|(i, &t)| (i, t))
        .collect();
    println!("data (pos, tok): {data:?}");
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("sweep");
    match mode {
        "gradcheck" => gradcheck(),
        "time" => time_full(),
        "grid" => grid(),
        "full" => full(&args[1..]),
        "fixedwin" => fixedwin(&args[1..]),
        "show" => show(&args[1..]),
        _ => sweep(),
    }
}
