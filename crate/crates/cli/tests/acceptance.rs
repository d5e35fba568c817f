//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use compsparse::kernels::{
    conv3x3_via_nine_1x1, pack_taps, sparse_dense_conv, sparse_sparse_conv, sparse_sparse_linear, stem_conv7x7,
};
use compsparse::kwta::{global_kwta_histogram, global_kwta_parallel, local_kwta, topk_fifo_merge};
use compsparse::network::{
    build_gsc_network, gsc_dense_plan, gsc_sparse_plan, random_frames, Allocation, GscSparsity, PlanSpec, Shape,
    WeightSource, GSC_INPUT,
};
use compsparse::oracle::{dense_conv_reference, dense_linear_reference, expand_weights, naive_topk};
use compsparse::packing::{expand_blocks, generate_complementary_masks, unpack, verify_complementarity};
use compsparse::resource_model::estimate_ports;
use compsparse::{AugmentedWeightTensor, ConvConfig, KwtaConfig, QTensor, SparseKernel, SparseMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn nonzero(rng: &mut ChaCha8Rng) -> i8 {
    let w: i8 = rng.gen_range(1..=127);
    if rng.gen_bool(0.5) {
        w
    } else {
        -w
    }
}

fn masked_kernels(rng: &mut ChaCha8Rng, shape: &[usize], n: usize, count: usize, block: usize) -> Vec<SparseKernel> {
    let seed = rng.gen();
    let masks = if block > 1 {
        expand_blocks(&generate_complementary_masks(&shape[..2], n / block, count, seed).unwrap(), block)
    } else {
        generate_complementary_masks(shape, n, count, seed).unwrap()
    };
    masks
        .iter()
        .enumerate()
        .map(|(id, m)| {
            let w: Vec<i8> = (0..m.count_ones()).map(|_| nonzero(rng)).collect();
            SparseKernel::from_support(id, shape.to_vec(), m.ones(), &w).unwrap()
        })
        .collect()
}

fn dense_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> QTensor {
    QTensor::new(vec![h, w, c], (0..h * w * c).map(|_| rng.gen()).collect()).unwrap()
}

fn sparse_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, k: usize) -> SparseMap {
    let t = dense_map(rng, h, w, c);
    let locations = t
        .values()
        .chunks(c)
        .map(|v| local_kwta(v, &KwtaConfig::local(k, c)).unwrap())
        .collect();
    SparseMap::new(h, w, c, locations).unwrap()
}

fn mac_count_reproduction() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ConvConfig::new(1, 64, 64);
    let kernels = masked_kernels(&mut rng, &cfg.kernel_shape(), 4, 64, 1);
    let awt = AugmentedWeightTensor::pack(&kernels, cfg.kernel_shape(), 64).unwrap();
    ensure!(awt.sets() == 4, "expected S = 4, got {}", awt.sets());
    let (h, w) = (8, 8);
    let map = sparse_map(&mut rng, h, w, 64, 8);
    let (out, counts) = sparse_sparse_conv(&map, &awt, &cfg).unwrap();
    let oracle = dense_conv_reference(&map.densify(), &expand_weights(&kernels, 64, &cfg.kernel_shape()).unwrap(), &cfg).unwrap();
    let locations = (h * w) as u64;
    ensure!(out == oracle.output, "output differs from oracle");
    ensure!(counts.mults == 32 * locations, "{} multiplies over {locations} locations", counts.mults);
    ensure!(counts.adds == 32 * locations, "{} adds over {locations} locations", counts.adds);
    ensure!(oracle.dense_macs == 4096 * locations, "dense MACs {}", oracle.dense_macs);
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("32 multiplies and 32 adds per location vs 4096 dense ({elapsed:.2?})"))
}

fn multiplicative_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = 64u64;
    for n in [1usize, 2, 4, 8, 16] {
        let kernels = masked_kernels(&mut rng, &[64], n, 64, 1);
        let awt = AugmentedWeightTensor::pack(&kernels, vec![64], 64).unwrap();
        let matrix = expand_weights(&kernels, 64, &[64]).unwrap();
        for k in [1usize, 2, 4, 8, 16] {
            let v: Vec<i8> = (0..64).map(|_| rng.gen()).collect();
            let act = global_kwta_histogram(&v, &KwtaConfig::global(k)).unwrap();
            let (out, counts) = sparse_sparse_linear(&act, &awt).unwrap();
            let oracle = dense_linear_reference(&act.densify(), &matrix).unwrap();
            ensure!(out == oracle.output.values(), "N={n} K={k}: output differs");
            // executed / dense == (K / C) * (N / C), compared exactly
            ensure!(
                counts.mults * c * c == oracle.dense_macs * (k * n) as u64,
                "N={n} K={k}: {} of {} executed",
                counts.mults,
                oracle.dense_macs
            );
            ensure!(counts.adds == counts.mults, "N={n} K={k}: adds {} != mults", counts.adds);
        }
    }
    Ok("ratio = (K/64)(N/64) for all 25 (N, K) pairs".into())
}

fn oracle_equivalence() -> Outcome {
    const TRIALS: usize = 1000;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0usize;
    let conv = |rng: &mut ChaCha8Rng, k: usize| {
        let (cin, cout) = (rng.gen_range(1..17), rng.gen_range(1..33));
        let n = rng.gen_range(1..=(k * k * cin).min(16));
        let cfg = ConvConfig::new(k, cin, cout)
            .with_stride(rng.gen_range(1..3))
            .with_padding(rng.gen_range(0..=k / 2));
        (cfg, n)
    };
    for k in [1usize, 3, 5] {
        for t in 0..TRIALS {
            let (cfg, n) = conv(&mut rng, k);
            let kernels = masked_kernels(&mut rng, &cfg.kernel_shape(), n, cfg.out_channels, 1);
            let awt = AugmentedWeightTensor::pack(&kernels, cfg.kernel_shape(), cfg.out_channels).unwrap();
            let (h, w) = (rng.gen_range(k..k + 6), rng.gen_range(k..k + 6));
            let x = dense_map(&mut rng, h, w, cfg.in_channels);
            let dense_w = expand_weights(&kernels, cfg.out_channels, &cfg.kernel_shape()).unwrap();
            let (out, _) = sparse_dense_conv(&x, &awt, &cfg).unwrap();
            ensure!(out == dense_conv_reference(&x, &dense_w, &cfg).unwrap().output, "sparse-dense {k}x{k} trial {t}");
            checked += 1;
        }
    }
    for t in 0..TRIALS {
        let cout = rng.gen_range(1..33);
        let n = 3 * rng.gen_range(1..=16);
        let cfg = ConvConfig::new(7, 3, cout).with_stride(2).with_padding(3);
        let kernels = masked_kernels(&mut rng, &cfg.kernel_shape(), n, cout, 3);
        let awt = AugmentedWeightTensor::pack(&kernels, cfg.kernel_shape(), cout).unwrap();
        let (h, w) = (rng.gen_range(7..20), rng.gen_range(7..20));
        let x = dense_map(&mut rng, h, w, 3);
        let dense_w = expand_weights(&kernels, cout, &cfg.kernel_shape()).unwrap();
        let (out, _) = stem_conv7x7(&x, &awt, &cfg).unwrap();
        ensure!(out == dense_conv_reference(&x, &dense_w, &cfg).unwrap().output, "7x7 stem trial {t}");
        checked += 1;
    }
    for k in [1usize, 3] {
        for t in 0..TRIALS {
            let (cin, cout) = (8 * rng.gen_range(1..9), rng.gen_range(1..65));
            let n = rng.gen_range(1..=cin.min(16));
            let cfg = ConvConfig::new(k, cin, cout).with_padding(rng.gen_range(0..=k / 2));
            let kernels = masked_kernels(&mut rng, &cfg.kernel_shape(), n, cout, 1);
            let awt = AugmentedWeightTensor::pack(&kernels, cfg.kernel_shape(), cout).unwrap();
            let (h, w) = (rng.gen_range(k..k + 5), rng.gen_range(k..k + 5));
            let act_k = rng.gen_range(0..=cin);
            let map = sparse_map(&mut rng, h, w, cin, act_k);
            let dense_w = expand_weights(&kernels, cout, &cfg.kernel_shape()).unwrap();
            let oracle = dense_conv_reference(&map.densify(), &dense_w, &cfg).unwrap().output;
            let (out, counts) = sparse_sparse_conv(&map, &awt, &cfg).unwrap();
            ensure!(out == oracle, "sparse-sparse {k}x{k} trial {t}");
            if k == 3 {
                let taps = pack_taps(&kernels, &cfg).unwrap();
                let (nine, nine_counts) = conv3x3_via_nine_1x1(&map, &taps, &cfg).unwrap();
                ensure!(nine == oracle, "nine 1x1 decomposition trial {t}");
                ensure!(nine_counts == counts, "nine 1x1 counts trial {t}");
            }
            checked += 1;
        }
    }
    for t in 0..TRIALS {
        let len = rng.gen_range(1..2000);
        let n_out = rng.gen_range(1..300);
        let n = rng.gen_range(1..=len.min(40));
        let kernels = masked_kernels(&mut rng, &[len], n, n_out, 1);
        let awt = AugmentedWeightTensor::pack(&kernels, vec![len], n_out).unwrap();
        let v: Vec<i8> = (0..len).map(|_| rng.gen()).collect();
        let act = global_kwta_histogram(&v, &KwtaConfig::global(rng.gen_range(0..=len))).unwrap();
        let matrix = expand_weights(&kernels, n_out, &[len]).unwrap();
        let (out, _) = sparse_sparse_linear(&act, &awt).unwrap();
        ensure!(out == dense_linear_reference(&act.densify(), &matrix).unwrap().output.values(), "sparse-sparse linear trial {t}");
        checked += 1;
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("{checked} randomized instances bit-exact against the dense oracle ({elapsed:.2?})"))
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<i8> {
    match rng.gen_range(0..3) {
        0 => (0..len).map(|_| rng.gen()).collect(),
        1 => (0..len).map(|_| rng.gen_range(-2..=2)).collect(),
        _ => {
            let v: i8 = rng.gen();
            (0..len).map(|_| if rng.gen_bool(0.8) { v } else { rng.gen() }).collect()
        }
    }
}

fn kwta_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    const VECTORS: usize = 10_000;
    for t in 0..VECTORS {
        let len = rng.gen_range(1..400);
        let v = random_vector(&mut rng, len);
        let k = rng.gen_range(0..=len + 4);
        let expect = naive_topk(&v, k);
        let global = global_kwta_histogram(&v, &KwtaConfig::global(k)).unwrap();
        ensure!(global.winners() == expect.winners(), "global vector {t}");
        ensure!(global.winners().len() == k.min(len), "global vector {t}: {} winners", global.winners().len());
        let lanes = rng.gen_range(1..9);
        let parallel = global_kwta_parallel(&v, &KwtaConfig::global(k), lanes).unwrap();
        ensure!(parallel.winners() == expect.winners(), "{lanes}-lane histogram vector {t}");

        let divisors: Vec<usize> = (1..=len).filter(|p| len % p == 0).collect();
        let p = divisors[rng.gen_range(0..divisors.len())];
        let lk = rng.gen_range(0..=p);
        let local = local_kwta(&v, &KwtaConfig::local(lk, p)).unwrap();
        let mut expect_local = Vec::new();
        for (i, chunk) in v.chunks(p).enumerate() {
            expect_local.extend(naive_topk(chunk, lk).winners().iter().map(|w| (i * p + w.index, w.value)));
        }
        let got: Vec<(usize, i8)> = local.winners().iter().map(|w| (w.index, w.value)).collect();
        ensure!(got == expect_local, "local vector {t} partition {p}");

        let v64 = random_vector(&mut rng, 64);
        let k64 = rng.gen_range(0..=64);
        let fifo = topk_fifo_merge(&v64, k64).unwrap();
        ensure!(fifo.winners() == naive_topk(&v64, k64).winners(), "FIFO merge vector {t}");
        ensure!(fifo.winners().len() == k64, "FIFO merge vector {t}: {} winners", fifo.winners().len());
    }
    Ok(format!("{VECTORS} vectors: global, lane-merged, local and FIFO-merge selection match the sorted oracle"))
}

fn packing_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in 0..1000 {
        let shape = vec![rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..9)];
        let positions: usize = shape.iter().product();
        let n = rng.gen_range(1..=positions);
        let count = rng.gen_range(1..40);
        let kernels = masked_kernels(&mut rng, &shape, n, count, 1);
        let awt = AugmentedWeightTensor::pack(&kernels, shape.clone(), count).unwrap();
        for members in awt.set_members() {
            let set: Vec<SparseKernel> = members.iter().map(|&i| kernels[i].clone()).collect();
            ensure!(verify_complementarity(&set).is_ok(), "packing {t}: set not complementary");
        }
        ensure!(unpack(&awt) == kernels, "packing {t}: unpack differs");
    }
    let five = masked_kernels(&mut rng, &[5, 5], 5, 5, 1);
    let one = AugmentedWeightTensor::pack(&five, vec![5, 5], 5).unwrap();
    ensure!(one.sets() == 1 && one.filled() == 25, "5 kernels: {} sets, {} filled", one.sets(), one.filled());
    let twenty = masked_kernels(&mut rng, &[5, 5], 5, 20, 1);
    let four = AugmentedWeightTensor::pack(&twenty, vec![5, 5], 20).unwrap();
    let sizes: Vec<usize> = four.set_members().iter().map(Vec::len).collect();
    ensure!(sizes == vec![5; 4], "20 kernels partitioned as {sizes:?}");
    Ok("1000 random packings round-trip; 5 kernels fill one 5x5 slice; 20 kernels form 4 sets of 5".into())
}

fn plans_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../plans")
}

fn gsc_accounting() -> Outcome {
    let dense = gsc_dense_plan().count_parameters().map_err(|e| e.to_string())?;
    ensure!(dense.dense == 2_522_128, "dense count {}", dense.dense);
    let text = std::fs::read_to_string(plans_dir().join("gsc_allocation.json")).map_err(|e| e.to_string())?;
    let allocation: Allocation = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let sparsity = GscSparsity {
        allocation,
        ..GscSparsity::default()
    };
    let plan = gsc_sparse_plan(&sparsity).map_err(|e| e.to_string())?;
    let sparse = plan.count_parameters().map_err(|e| e.to_string())?;
    ensure!(sparse.nonzero == 127_696, "non-zero count {}", sparse.nonzero);
    for p in [&gsc_dense_plan(), &plan] {
        let chain = p.shape_chain().map_err(|e| e.to_string())?;
        ensure!(chain.last() == Some(&Shape::Vector(12)), "chain ends at {:?}", chain.last());
    }
    let model = build_gsc_network(
        Some(&sparsity),
        WeightSource::Synthetic {
            seed: 6,
            calibration_frames: 4,
        },
    )
    .map_err(|e| e.to_string())?;
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for frame in random_frames(GSC_INPUT, 8, 60) {
        let r = model.infer(&frame).map_err(|e| e.to_string())?;
        ensure!(r.activation_sparsity.len() == 3, "{} k-WTA layers", r.activation_sparsity.len());
        for (name, s) in &r.activation_sparsity {
            ensure!((0.88..=0.90).contains(s), "{name} sparsity {s:.4}");
            lo = lo.min(*s);
            hi = hi.max(*s);
        }
    }
    Ok(format!(
        "2,522,128 dense, 127,696 non-zero, output 12, activation sparsity {:.2}%..{:.2}%",
        100.0 * lo,
        100.0 * hi
    ))
}

fn resource_scaling() -> Outcome {
    let e = estimate_ports(64, 64, 4, 8, 8, Some(6)).map_err(|e| e.to_string())?;
    ensure!(
        (e.ports, e.port_width_bits, e.total_bandwidth_bits_per_cycle) == (8, 56, 448),
        "example gave {e:?}"
    );
    let mut checked = 0;
    for c in [64u64, 128, 256] {
        for n in [1u64, 2, 4, 8, 16] {
            for k in [1u64, 2, 4, 8, 16, 32] {
                let base = estimate_ports(c, c, n, k, 8, None).map_err(|e| e.to_string())?;
                let dk = estimate_ports(c, c, n, 2 * k, 8, None).map_err(|e| e.to_string())?;
                let dn = estimate_ports(c, c, 2 * n, k, 8, None).map_err(|e| e.to_string())?;
                ensure!(dk.ports == 2 * base.ports, "C={c} N={n} K={k}: ports");
                ensure!(
                    dk.total_bandwidth_bits_per_cycle == 2 * base.total_bandwidth_bits_per_cycle,
                    "C={c} N={n} K={k}: bandwidth"
                );
                ensure!(dn.port_width_bits == 2 * base.port_width_bits, "C={c} N={n} K={k}: width");
                checked += 1;
            }
        }
    }
    Ok(format!("exact 2x scaling in K and N over {checked} configurations"))
}

fn csnn(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_csnn"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("csnn {}: {}", args[0], String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

struct BenchRun {
    executed: u64,
    throughput: f64,
}

fn bench(model: &Path, frames: &Path, count: usize, mode: &str, out: &Path) -> Result<BenchRun, String> {
    let n = count.to_string();
    csnn(&["bench", "--model", p(model), "--frames", &n, "--instances", "1", "--input", p(frames), "--mode", mode, "--out", p(out)])?;
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok(BenchRun {
        executed: v["mac_report"]["total"]["executed_mults"].as_u64().ok_or("no MAC total")?,
        throughput: v["throughput_ips"].as_f64().ok_or("no throughput")?,
    })
}

fn p(path: &Path) -> &str {
    path.to_str().expect("UTF-8 path")
}

fn generate(dir: &Path, name: &str, plan: &PlanSpec) -> Result<PathBuf, String> {
    let plan_path = dir.join(format!("{name}.plan.json"));
    std::fs::write(&plan_path, serde_json::to_string(plan).unwrap()).map_err(|e| e.to_string())?;
    let prefix = dir.join(name);
    csnn(&["gen-synthetic", "--plan", p(&plan_path), "--seed", "8", "--frames", "4", "--out", p(&prefix)])?;
    Ok(prefix)
}

fn monotone_and_throughput() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = dir.path();
    let with = |alloc: [usize; 4], conv_k: usize, linear_k: usize| {
        let allocation = ["conv1", "conv2", "linear1", "output"]
            .iter()
            .zip(alloc)
            .map(|(n, v)| (n.to_string(), v))
            .collect();
        gsc_sparse_plan(&GscSparsity {
            allocation,
            conv_k,
            linear_k,
            ..GscSparsity::default()
        })
        .unwrap()
    };
    let base = generate(dir, "base", &with([1, 108, 80, 60], 7, 165))?;
    let frames = base.with_extension("frames");
    let out = dir.join("bench.json");

    let n_sweep = [[4, 432, 320, 240], [2, 216, 160, 120], [1, 108, 80, 60], [1, 54, 40, 30], [1, 27, 20, 15]];
    let mut n_totals = Vec::new();
    for (i, alloc) in n_sweep.iter().enumerate() {
        let prefix = generate(dir, &format!("n{i}"), &with(*alloc, 7, 165))?;
        n_totals.push(bench(&prefix.with_extension("csnn"), &frames, 4, "sparse-sparse", &out)?.executed);
    }
    ensure!(n_totals.windows(2).all(|w| w[1] < w[0]), "executed MACs over decreasing N: {n_totals:?}");

    let k_sweep = [(32, 660), (16, 330), (7, 165), (4, 80), (2, 40), (1, 20)];
    let mut k_totals = Vec::new();
    for (i, &(ck, lk)) in k_sweep.iter().enumerate() {
        let prefix = generate(dir, &format!("k{i}"), &with([1, 108, 80, 60], ck, lk))?;
        k_totals.push(bench(&prefix.with_extension("csnn"), &frames, 4, "sparse-sparse", &out)?.executed);
    }
    ensure!(k_totals.windows(2).all(|w| w[1] < w[0]), "executed MACs over decreasing K: {k_totals:?}");

    let model = base.with_extension("csnn");
    let sparse = bench(&model, &frames, 64, "sparse-sparse", &out)?;
    let dense = bench(&model, &frames, 16, "dense", &out)?;
    let speedup = sparse.throughput / dense.throughput;
    ensure!(speedup.total_cmp(&5.0).is_ge(), "sparse-sparse {:.1}/s vs dense oracle {:.1}/s", sparse.throughput, dense.throughput);
    Ok(format!(
        "executed MACs fall strictly with N {n_totals:?} and K {k_totals:?}; host throughput {:.0}/s vs {:.0}/s dense oracle ({speedup:.1}x)",
        sparse.throughput, dense.throughput
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("MAC-count reproduction", mac_count_reproduction),
        ("multiplicative law", multiplicative_law),
        ("oracle equivalence", oracle_equivalence),
        ("k-WTA equivalence", kwta_equivalence),
        ("packing round-trip", packing_round_trip),
        ("GSC accounting", gsc_accounting),
        ("resource model scaling", resource_scaling),
        ("MAC monotonicity and host throughput", monotone_and_throughput),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
