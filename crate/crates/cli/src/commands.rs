//! Subcommand implementations. Each writes its human-readable output to `out`.

use std::fs;
use std::io::Write;
use std::path::Path;

use compsparse::network::{
    build_synthetic, random_frames, Allocation, ExecMode, LayerWeights, ModelGraph, ParameterCount, PlanSpec,
};
use compsparse::packing::{combine, verify_complementarity, ComplementarySet};
use compsparse::resource_model::estimate_ports;
use compsparse::{AugmentedWeightTensor, QTensor, SparseKernel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench;
use crate::container;
use crate::error::{CliError, CliResult};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io("<stdout>", e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskFile {
    pub plan: PlanSpec,
    pub layers: Vec<MaskLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskLayer {
    pub name: String,
    /// Support of kernel `i`, as flat positions.
    pub masks: Vec<Vec<usize>>,
    /// Optional explicit partition into complementary sets (kernel indices).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sets: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightFile {
    pub layers: Vec<WeightLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightLayer {
    pub name: String,
    #[serde(default)]
    pub shift: u32,
    #[serde(default)]
    pub bias: Option<Vec<i32>>,
    /// Weights of kernel `i`, in the order of its mask positions.
    pub weights: Vec<Vec<i8>>,
}

/// One line per layer: `name: S sets × m kernels (S=.., N=..)`.
pub fn set_summary(name: &str, awt: &AugmentedWeightTensor) -> String {
    let sizes: Vec<usize> = awt.set_members().iter().map(Vec::len).collect();
    let body = match sizes.first() {
        Some(&m) if sizes.iter().all(|&s| s == m) => format!("{} sets × {m} kernels", sizes.len()),
        Some(_) => format!("{} sets of {:?} kernels", sizes.len(), sizes),
        None => "0 sets".to_string(),
    };
    format!("{name}: {body} (S={}, N={})", awt.sets(), awt.n_per_kernel())
}

fn pack_layer(
    plan: &PlanSpec,
    masks: &MaskLayer,
    weights: Option<&WeightLayer>,
) -> CliResult<LayerWeights> {
    let (idx, _) = plan
        .layers
        .iter()
        .enumerate()
        .find(|(_, l)| l.name == masks.name)
        .ok_or_else(|| CliError::Data(format!("masks for unknown layer {:?}", masks.name)))?;
    let geo = plan.geometry()?[idx]
        .clone()
        .ok_or_else(|| CliError::Data(format!("layer {:?} has no weights", masks.name)))?;
    if masks.masks.len() > geo.n_out {
        return Err(CliError::Data(format!(
            "layer {:?}: {} masks for {} kernels",
            masks.name,
            masks.masks.len(),
            geo.n_out
        )));
    }
    let w = weights.ok_or_else(|| CliError::Data(format!("no weights for layer {:?}", masks.name)))?;
    if w.weights.len() != masks.masks.len() {
        return Err(CliError::Data(format!(
            "layer {:?}: {} weight vectors for {} masks",
            masks.name,
            w.weights.len(),
            masks.masks.len()
        )));
    }
    let kernels = masks
        .masks
        .iter()
        .zip(&w.weights)
        .enumerate()
        .map(|(id, (m, ws))| SparseKernel::from_support(id, geo.kernel_shape.clone(), m, ws))
        .collect::<compsparse::Result<Vec<_>>>()?;
    let awt = match &masks.sets {
        None => AugmentedWeightTensor::pack(&kernels, geo.kernel_shape.clone(), geo.n_out)?,
        Some(groups) => {
            let mut seen = vec![false; kernels.len()];
            for &id in groups.iter().flatten() {
                match seen.get_mut(id) {
                    Some(s) if !*s => *s = true,
                    _ => {
                        return Err(CliError::Data(format!(
                            "layer {:?}: kernel {id} is missing or listed twice in sets",
                            masks.name
                        )))
                    }
                }
            }
            if let Some(id) = seen.iter().position(|s| !s) {
                return Err(CliError::Data(format!("layer {:?}: kernel {id} is in no set", masks.name)));
            }
            let mut slices = Vec::with_capacity(groups.len());
            for g in groups {
                let members: Vec<SparseKernel> = g.iter().map(|&i| kernels[i].clone()).collect();
                verify_complementarity(&members)?;
                let set = ComplementarySet {
                    member_kernel_ids: g.clone(),
                    shape: geo.kernel_shape.clone(),
                };
                slices.push(combine(&set, &kernels)?);
            }
            AugmentedWeightTensor::stack(geo.kernel_shape.clone(), geo.n_out, &slices)?
        }
    };
    Ok(LayerWeights {
        name: masks.name.clone(),
        weights: awt,
        bias: w.bias.clone().unwrap_or_else(|| vec![0; geo.n_out]),
        shift: w.shift,
    })
}

pub fn pack(masks_path: &Path, weights_path: &Path, out_path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let masks: MaskFile = read_json(masks_path)?;
    let weights: WeightFile = read_json(weights_path)?;
    if masks.layers.is_empty() {
        return Err(CliError::Data(format!("{}: no mask layers", masks_path.display())));
    }
    let mut packed = Vec::new();
    for m in &masks.layers {
        let w = weights.layers.iter().find(|w| w.name == m.name);
        packed.push(pack_layer(&masks.plan, m, w)?);
    }
    let summary: Vec<String> = packed.iter().map(|lw| set_summary(&lw.name, &lw.weights)).collect();
    let model = ModelGraph::new(masks.plan, packed)?;
    container::save(&model, out_path)?;
    emit(out, &(summary.join("\n") + "\n"))
}

/// Splits a raw int8 file into frames of the model's input shape.
pub fn read_frames(path: &Path, shape: [usize; 3]) -> CliResult<Vec<QTensor>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let len: usize = shape.iter().product();
    if bytes.is_empty() || bytes.len() % len != 0 {
        return Err(CliError::Data(format!(
            "{}: {} bytes is not a whole number of {}x{}x{} frames",
            path.display(),
            bytes.len(),
            shape[0],
            shape[1],
            shape[2]
        )));
    }
    Ok(bytes
        .chunks(len)
        .map(|c| QTensor::new(shape.to_vec(), c.iter().map(|&b| b as i8).collect()).expect("chunk matches shape"))
        .collect())
}

pub fn frames_to_bytes(frames: &[QTensor]) -> Vec<u8> {
    frames.iter().flat_map(|f| f.values().iter().map(|&v| v as u8)).collect()
}

pub fn infer(
    model_path: &Path,
    input_path: &Path,
    mode: Option<ExecMode>,
    report: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let model = container::load(model_path)?;
    let mode = mode.unwrap_or(model.mode());
    let frames = read_frames(input_path, model.plan().input)?;
    let mut macs = compsparse::network::MacReport::default();
    let mut text = String::new();
    for (i, f) in frames.iter().enumerate() {
        let r = model.infer_with(f, mode)?;
        macs.accumulate(&r.macs)?;
        text.push_str(&format!("frame {i}: class {} logits {:?}\n", r.predicted_class(), r.logits));
    }
    let total = macs.total();
    text.push_str(&format!(
        "mode {mode}: executed {} of {} dense MACs ({:.4}%)\n",
        total.executed_mults,
        total.dense_macs,
        100.0 * total.ratio
    ));
    if let Some(p) = report {
        write_file(p, macs.to_csv())?;
    }
    emit(out, &text)
}

pub struct BenchArgs<'a> {
    pub model: &'a Path,
    pub frames: usize,
    pub instances: usize,
    pub out: &'a Path,
    pub input: Option<&'a Path>,
    pub mode: Option<ExecMode>,
    pub seed: u64,
}

pub fn bench(args: &BenchArgs, out: &mut dyn Write) -> CliResult<bench::BenchResult> {
    if args.instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let model = container::load(args.model)?;
    let mode = args.mode.unwrap_or(model.mode());
    let frames: Vec<QTensor> = match args.input {
        Some(p) => {
            let pool = read_frames(p, model.plan().input)?;
            (0..args.frames).map(|j| pool[j % pool.len()].clone()).collect()
        }
        None => random_frames(model.plan().input, args.frames, args.seed),
    };
    let threads = bench::worker_count(args.instances);
    let result = bench::run(&model, &frames, args.instances, mode, threads)?;
    let json = serde_json::to_string_pretty(&result).expect("bench result serializes");
    write_file(args.out, json + "\n")?;
    let executed = result.mac_report.total.as_ref().map_or(0, |t| t.executed_mults);
    emit(
        out,
        &format!(
            "{} frames, {} instances on {} threads, mode {}: {:.1} inferences/s, {} executed multiplies, logits {}\n",
            result.frames, result.instances, result.threads, mode, result.throughput_ips, executed, result.logits_digest
        ),
    )?;
    Ok(result)
}

pub fn resources(c_in: u64, c_out: u64, n: u64, k: u64, bw: u64, bid: Option<u64>, out: &mut dyn Write) -> CliResult<()> {
    let est = estimate_ports(c_in, c_out, n, k, bw, bid)?;
    emit(out, &(serde_json::to_string_pretty(&est).expect("estimate serializes") + "\n"))
}

#[derive(Debug, Clone, Serialize)]
struct LayerSidecar {
    name: String,
    kernel_shape: Vec<usize>,
    kernels: usize,
    n: usize,
    sets: usize,
    shift: u32,
}

#[derive(Debug, Clone, Serialize)]
struct Sidecar<'a> {
    seed: u64,
    frames: usize,
    parameters: ParameterCount,
    layers: Vec<LayerSidecar>,
    plan: &'a PlanSpec,
}

pub struct GenArgs<'a> {
    pub plan: &'a Path,
    pub allocation: Option<&'a Path>,
    pub seed: u64,
    pub out_prefix: &'a Path,
    pub frames: usize,
    pub calibration_frames: usize,
}

fn with_ext(prefix: &Path, ext: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

/// Writes `<prefix>.csnn`, `<prefix>.json` and `<prefix>.frames`.
pub fn gen_synthetic(args: &GenArgs, out: &mut dyn Write) -> CliResult<ParameterCount> {
    let mut plan: PlanSpec = read_json(args.plan)?;
    if let Some(p) = args.allocation {
        let allocation: Allocation = read_json(p)?;
        plan = plan.with_allocation(&allocation)?;
    }
    let model = build_synthetic(plan, args.seed, args.calibration_frames)?;
    let params = model.count_parameters()?;
    container::save(&model, &with_ext(args.out_prefix, "csnn"))?;
    let frames = random_frames(model.plan().input, args.frames, args.seed.wrapping_add(1));
    write_file(&with_ext(args.out_prefix, "frames"), frames_to_bytes(&frames))?;
    let layers = model
        .layer_weights()
        .map(|lw| LayerSidecar {
            name: lw.name.clone(),
            kernel_shape: lw.weights.kernel_shape().to_vec(),
            kernels: lw.weights.n_out(),
            n: lw.weights.n_per_kernel(),
            sets: lw.weights.sets(),
            shift: lw.shift,
        })
        .collect();
    let sidecar = Sidecar {
        seed: args.seed,
        frames: args.frames,
        parameters: params,
        layers,
        plan: model.plan(),
    };
    write_file(
        &with_ext(args.out_prefix, "json"),
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n",
    )?;
    let mut text = format!("dense parameters: {}\nnon-zero weights: {}\n", params.dense, params.nonzero);
    for lw in model.layer_weights() {
        text.push_str(&set_summary(&lw.name, &lw.weights));
        text.push('\n');
    }
    emit(out, &text)?;
    Ok(params)
}
