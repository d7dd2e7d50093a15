//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use srde_core::autotune::{feasible_configs, tune, tune_over, TuneResult};
use srde_core::dictionary::{build_dictionary, communication_footprint};
use srde_core::engine::{measure_latency, median, synthetic_cost, VolumeDims};
use srde_core::image::{load_image, save_image, synthetic_image};
use srde_core::metrics::{psnr, ssim};
use srde_core::ops::degrade;
use srde_core::pipeline::{prepare_operands, upscale, FilterOperands};
use srde_core::predictor::random_init;
use srde_core::pruning::{prune_dictionary, refit_predictor, TrainingPair};
use srde_core::{BlockConfig, Dictionary, HardwareSpec, PredictorWeights, Rng, Tensor};

use crate::config::{parse_list, parse_size, RunConfig};
use crate::CliError;

pub type CmdResult = Result<(), CliError>;

/// Settings shared by every subcommand after merging file and flags.
pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
}

impl Context {
    fn scale(&self) -> Result<usize, CliError> {
        let s = self.config.get_or("scale", 2usize)?;
        check_scale(s)?;
        Ok(s)
    }

    fn blur_sigma(&self, scale: usize) -> Result<f64, CliError> {
        self.config.get_or("prune.blur_sigma", default_blur(scale))
    }
}

fn check_scale(s: usize) -> CmdResult {
    if (2..=4).contains(&s) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("scale must be 2, 3 or 4, got {s}")))
    }
}

/// Blur that roughly band-limits to the decimated grid.
fn default_blur(scale: usize) -> f64 {
    0.5 * scale as f64
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| CliError::Core(e.into()))
}

fn crop_to_multiple(t: &Tensor, scale: usize) -> Result<Tensor, CliError> {
    let (h, w) = (t.h() - t.h() % scale, t.w() - t.w() % scale);
    if h == 0 || w == 0 {
        return Err(CliError::Usage(format!(
            "{}x{} image is smaller than scale {scale}",
            t.h(),
            t.w()
        )));
    }
    if (h, w) == (t.h(), t.w()) {
        return Ok(t.clone());
    }
    log::warn!("cropping {}x{} to {h}x{w} to match scale {scale}", t.h(), t.w());
    let src = t.plane(0, 0);
    let data = (0..h).flat_map(|i| src[i * t.w()..i * t.w() + w].iter().copied()).collect();
    Ok(Tensor::image(h, w, data)?)
}

pub fn gen_dict(ctx: &Context, out: &Path) -> CmdResult {
    let params = ctx.config.dictionary_params()?;
    let dict = build_dictionary(&params)?;
    dict.save(out)?;
    println!("L={} k={}", dict.len(), dict.k());
    Ok(())
}

pub fn init_weights(ctx: &Context, out: &Path, dict: Option<&Path>, filters: Option<usize>) -> CmdResult {
    let l = match (dict, filters) {
        (Some(p), None) => Dictionary::load(p)?.len(),
        (None, Some(n)) => n,
        _ => return Err(CliError::Usage("give exactly one of --dict or --filters".into())),
    };
    let scale = ctx.scale()?;
    let hidden = ctx.config.get_or("predictor.hidden", 16usize)?;
    let res_blocks = ctx.config.get_or("predictor.res_blocks", 2usize)?;
    let weights = random_init(ctx.seed, scale, l, hidden, res_blocks)?;
    weights.save(out)?;
    println!(
        "scale={scale} L={l} hidden={hidden} res_blocks={res_blocks} layers={}",
        weights.layers().len()
    );
    Ok(())
}

pub fn degrade_image(ctx: &Context, input: &Path, out: &Path, sigma: Option<f64>) -> CmdResult {
    let scale = ctx.scale()?;
    let hr = crop_to_multiple(&load_image(input)?, scale)?;
    let sigma = match sigma {
        Some(s) => s,
        None => ctx.blur_sigma(scale)?,
    };
    let lr = degrade(&hr, scale, sigma)?;
    save_image(&lr, out)?;
    println!("{}x{} -> {}x{}", hr.h(), hr.w(), lr.h(), lr.w());
    Ok(())
}

fn load_models(ctx: &Context, dict: &Path, weights: &Path) -> Result<(Dictionary, PredictorWeights), CliError> {
    let dict = Dictionary::load(dict)?;
    let weights = PredictorWeights::load(weights)?;
    check_scale(weights.scale())?;
    if let Some(s) = ctx.config.get::<usize>("scale")? {
        if s != weights.scale() {
            return Err(CliError::Usage(format!(
                "--scale {s} disagrees with the weights' scale {}",
                weights.scale()
            )));
        }
    }
    if weights.coeff_count() != dict.len() {
        return Err(CliError::Usage(format!(
            "weights emit {} coefficients but the dictionary has {} filters",
            weights.coeff_count(),
            dict.len()
        )));
    }
    Ok((dict, weights))
}

/// Feasible configs ranked by synthetic cost, cheapest first.
fn ranked_configs(dims: VolumeDims, spec: &HardwareSpec) -> Result<Vec<BlockConfig>, CliError> {
    let set = feasible_configs(dims, spec)?;
    let mut scored: Vec<(f64, BlockConfig)> = set
        .configs
        .iter()
        .map(|&c| Ok((synthetic_cost(c, dims, spec)?, c)))
        .collect::<Result<_, srde_core::Error>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, c)| c).collect())
}

fn tuning_settings(ctx: &Context, budget: Option<usize>) -> Result<(usize, usize, usize), CliError> {
    let budget = match budget {
        Some(b) => b,
        None => ctx.config.get_or("tune.budget", 30usize)?,
    };
    let init = ctx.config.get_or("tune.init", 8usize)?;
    let repeats = ctx.config.get_or("tune.repeats", 3usize)?;
    Ok((budget, init, repeats))
}

fn measured_tune(
    ctx: &Context,
    ops: &FilterOperands,
    spec: &HardwareSpec,
    budget: Option<usize>,
) -> Result<TuneResult, CliError> {
    let (budget, init, repeats) = tuning_settings(ctx, budget)?;
    let prefilter = ctx.config.get_or("tune.prefilter", 50usize)?;
    let mut candidates = ranked_configs(VolumeDims::of(&ops.filters), spec)?;
    candidates.truncate(prefilter.max(1));
    let oracle = |c: BlockConfig| {
        measure_latency(&ops.filters, &ops.patches, c, spec, repeats).map(|m| m.median_ms)
    };
    Ok(tune_over(&candidates, oracle, budget, init.min(budget.saturating_sub(1)).max(1), ctx.seed)?)
}

pub struct UpscaleArgs<'a> {
    pub input: &'a Path,
    pub dict: &'a Path,
    pub weights: &'a Path,
    pub block: &'a str,
    pub budget: Option<usize>,
    pub out: &'a Path,
    pub timing: Option<&'a Path>,
    pub tune_log: Option<&'a Path>,
}

pub fn upscale_image(ctx: &Context, args: UpscaleArgs<'_>) -> CmdResult {
    let (dict, weights) = load_models(ctx, args.dict, args.weights)?;
    let spec = ctx.config.hardware_spec()?;
    let x = load_image(args.input)?;
    let dims = VolumeDims::new(x.h() * weights.scale(), x.w() * weights.scale(), dict.taps());
    let cfg = if args.block.eq_ignore_ascii_case("auto") {
        let ops = prepare_operands(&x, &weights, &dict)?;
        let result = measured_tune(ctx, &ops, &spec, args.budget)?;
        if let Some(path) = args.tune_log {
            write_text(path, &result.to_csv())?;
        }
        log::info!(
            "auto block {} at {:.3} ms after {} evaluations",
            result.best_config,
            result.best_latency,
            result.budget_used
        );
        result.best_config
    } else {
        let cfg: BlockConfig = args.block.parse()?;
        if !feasible_configs(dims, &spec)?.contains(&cfg) {
            return Err(srde_core::Error::Infeasible(format!(
                "block {cfg} is outside the feasible set for {}x{}x{}",
                dims.h, dims.w, dims.c
            ))
            .into());
        }
        cfg
    };
    let start = Instant::now();
    let (y, mut timings) = upscale(&x, &weights, &dict, cfg, &spec)?;
    save_image(&y, args.out)?;
    timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    let csv = timings.to_csv();
    match args.timing {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    log::info!("block {cfg}, {}x{} -> {}x{}", x.h(), x.w(), y.h(), y.w());
    Ok(())
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

fn training_pairs(ctx: &Context, dir: &Path, scale: usize) -> Result<Vec<TrainingPair>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read dataset {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .pgm/.ppm images in {}", dir.display())));
    }
    let sigma = ctx.blur_sigma(scale)?;
    files
        .iter()
        .map(|p| {
            let hr = crop_to_multiple(&load_image(p)?, scale)?;
            let lr = degrade(&hr, scale, sigma)?;
            Ok(TrainingPair { lr, hr })
        })
        .collect()
}

pub fn prune(ctx: &Context, dataset: &Path, dict: &Path, weights: &Path, out: &Path) -> CmdResult {
    let (dict, weights) = load_models(ctx, dict, weights)?;
    let pairs = training_pairs(ctx, dataset, weights.scale())?;
    let cfg = ctx.config.prune_config(ctx.seed)?;
    let outcome = prune_dictionary(&weights, &dict, &pairs, &cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::Core(e.into()))?;
    outcome.dictionary.save(out.join("dict.srd"))?;
    outcome.predictor.save(out.join("weights.srn"))?;
    write_text(&out.join("trace.csv"), &outcome.trace.to_csv())?;
    println!(
        "L {} -> {} in {} step(s); outputs in {}",
        dict.len(),
        outcome.dictionary.len(),
        outcome.trace.steps.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Oracle {
    Synthetic,
    Measured,
}

pub struct TuneArgs<'a> {
    pub dims: Option<&'a str>,
    pub image: Option<&'a Path>,
    pub dict: Option<&'a Path>,
    pub weights: Option<&'a Path>,
    pub oracle: Oracle,
    pub budget: Option<usize>,
    pub out: Option<&'a Path>,
}

fn parse_dims(text: &str) -> Option<VolumeDims> {
    let parts: Vec<usize> = text.split(['x', 'X']).map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    match parts[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Some(VolumeDims::new(h, w, c)),
        _ => None,
    }
}

fn random_operands(dims: VolumeDims, seed: u64) -> Result<FilterOperands, CliError> {
    let mut rng = Rng::new(seed);
    let mut random = || {
        let data = (0..dims.volume()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        Tensor::new(1, dims.c, dims.h, dims.w, data)
    };
    Ok(FilterOperands {
        filters: random()?,
        patches: random()?,
    })
}

pub fn tune_blocks(ctx: &Context, args: TuneArgs<'_>) -> CmdResult {
    let spec = ctx.config.hardware_spec()?;
    let (budget, init, repeats) = tuning_settings(ctx, args.budget)?;
    let init = init.min(budget.saturating_sub(1)).max(1);
    let measured = args.oracle == Oracle::Measured;
    let (dims, operands) = match (args.image, args.dims) {
        (Some(image), None) => {
            let (Some(d), Some(w)) = (args.dict, args.weights) else {
                return Err(CliError::Usage("--image needs --dict and --weights".into()));
            };
            let (dict, weights) = load_models(ctx, d, w)?;
            let x = load_image(image)?;
            let dims = VolumeDims::new(x.h() * weights.scale(), x.w() * weights.scale(), dict.taps());
            let ops = measured
                .then(|| prepare_operands(&x, &weights, &dict))
                .transpose()?;
            (dims, ops)
        }
        (None, Some(text)) => {
            let dims = parse_dims(text)
                .ok_or_else(|| CliError::Usage(format!("--dims '{text}' is not HxWxC")))?;
            let ops = measured.then(|| random_operands(dims, ctx.seed)).transpose()?;
            (dims, ops)
        }
        _ => return Err(CliError::Usage("give exactly one of --dims or --image".into())),
    };
    let result = match &operands {
        None => tune(dims, &spec, |c| synthetic_cost(c, dims, &spec), budget, init, ctx.seed)?,
        Some(ops) => tune(
            dims,
            &spec,
            |c| measure_latency(&ops.filters, &ops.patches, c, &spec, repeats).map(|m| m.median_ms),
            budget,
            init,
            ctx.seed,
        )?,
    };
    if let Some(path) = args.out {
        write_text(path, &result.to_csv())?;
    }
    println!(
        "best={} latency={} evaluations={}",
        result.best_config, result.best_latency, result.budget_used
    );
    Ok(())
}

pub struct BenchArgs<'a> {
    pub sizes: &'a str,
    pub scales: &'a str,
    pub ratios: &'a str,
    pub repeats: usize,
    pub out: Option<&'a Path>,
}

/// Training crop edge for the per-scale coefficient refits.
const BENCH_TRAIN_EDGE: usize = 96;

/// One model per ratio in `ratios` (descending). Starts from the full
/// dictionary after a least-squares refit; each smaller ratio is one
/// selection step from the previous model.
fn compressed_models(
    ctx: &Context,
    scale: usize,
    ratios: &[f64],
) -> Result<Vec<(Dictionary, PredictorWeights)>, CliError> {
    let dict = build_dictionary(&ctx.config.dictionary_params()?)?;
    let hidden = ctx.config.get_or("predictor.hidden", 16usize)?;
    let res_blocks = ctx.config.get_or("predictor.res_blocks", 2usize)?;
    let weights = random_init(ctx.seed, scale, dict.len(), hidden, res_blocks)?;
    let sigma = ctx.blur_sigma(scale)?;
    let pairs: Vec<TrainingPair> = (0..2)
        .map(|i| {
            let hr = synthetic_image(BENCH_TRAIN_EDGE, BENCH_TRAIN_EDGE, Rng::derive(ctx.seed, 100 + i))?;
            Ok(TrainingPair {
                lr: degrade(&hr, scale, sigma)?,
                hr,
            })
        })
        .collect::<Result<_, srde_core::Error>>()?;
    let base = ctx.config.prune_config(ctx.seed)?;
    let full = dict.len();
    let (weights, _) = refit_predictor(&weights, &dict, &pairs, &base)?;
    let mut current = (dict, weights);
    let mut models = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let target = ((r * full as f64).round() as usize).max(1);
        let len = current.0.len();
        if target < len {
            let alpha = target as f64 / len as f64;
            let delta = 1.0 - alpha;
            let cfg = srde_core::PruneConfig {
                alpha_target: alpha,
                delta_alpha: delta,
                epsilon: (base.epsilon * full as f64 / len as f64).min(0.5 * delta),
                ..base.clone()
            };
            let outcome = prune_dictionary(&current.1, &current.0, &pairs, &cfg)?;
            current = (outcome.dictionary, outcome.predictor);
        }
        models.push(current.clone());
    }
    Ok(models)
}

pub fn bench(ctx: &Context, args: BenchArgs<'_>) -> CmdResult {
    let sizes: Vec<(usize, usize)> = args
        .sizes
        .split(',')
        .map(|s| parse_size(s).ok_or_else(|| CliError::Usage(format!("bad size '{s}'"))))
        .collect::<Result<_, _>>()?;
    let scales: Vec<usize> =
        parse_list(args.scales).map_err(|_| CliError::Usage(format!("bad scales '{}'", args.scales)))?;
    let ratios: Vec<f64> =
        parse_list(args.ratios).map_err(|_| CliError::Usage(format!("bad ratios '{}'", args.ratios)))?;
    if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(CliError::Usage("ratios must lie in (0, 1]".into()));
    }
    if args.repeats == 0 {
        return Err(CliError::Usage("--repeats must be >= 1".into()));
    }
    let order: Vec<usize> = {
        let mut idx: Vec<usize> = (0..ratios.len()).collect();
        idx.sort_by(|&a, &b| ratios[b].total_cmp(&ratios[a]));
        idx
    };
    let sorted: Vec<f64> = order.iter().map(|&i| ratios[i]).collect();
    let spec = ctx.config.hardware_spec()?;

    let mut csv = String::from("size,scale,ratio,filters,median_ms,dictionary_ms,psnr,ssim\n");
    for &scale in &scales {
        check_scale(scale)?;
        let models = compressed_models(ctx, scale, &sorted)?;
        for &(h, w) in &sizes {
            let hr = synthetic_image(h * scale, w * scale, Rng::derive(ctx.seed, 7))?;
            let lr = degrade(&hr, scale, ctx.blur_sigma(scale)?)?;
            let dims = VolumeDims::new(h * scale, w * scale, models[0].0.taps());
            let cfg = ranked_configs(dims, &spec)?[0];
            let mut rows = vec![String::new(); ratios.len()];
            for (slot, (dict, weights)) in order.iter().zip(&models) {
                let mut totals = Vec::with_capacity(args.repeats);
                let mut dict_ms = Vec::with_capacity(args.repeats);
                let mut output = None;
                for _ in 0..args.repeats {
                    let (y, t) = upscale(&lr, weights, dict, cfg, &spec)?;
                    totals.push(t.total_ms);
                    dict_ms.push(t.dictionary_ms());
                    output = Some(y);
                }
                let y = output.expect("at least one repeat").map(|v| v.clamp(0.0, 1.0));
                rows[*slot] = format!(
                    "{h}x{w},{scale},{},{},{:.4},{:.4},{:.4},{:.6}",
                    ratios[*slot],
                    dict.len(),
                    median(&totals),
                    median(&dict_ms),
                    psnr(&y, &hr, 1.0)?,
                    ssim(&y, &hr)?
                );
            }
            for row in rows {
                let _ = writeln!(csv, "{row}");
            }
        }
    }
    match args.out {
        Some(path) => write_text(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn metrics(a: &Path, b: &Path) -> CmdResult {
    let (a, b) = (load_image(a)?, load_image(b)?);
    println!("psnr={}", psnr(&a, &b, 1.0)?);
    println!("ssim={}", ssim(&a, &b)?);
    Ok(())
}

pub fn footprint(ctx: &Context, height: u64, width: u64, filters: u64, k: u64) -> CmdResult {
    let scale = ctx.scale()? as u64;
    let r = communication_footprint(height, width, scale, filters, k)?;
    println!("operand,elements,bytes");
    println!("phi,{},{}", r.phi_elems, r.phi_bytes());
    println!("patches,{},{}", r.patch_elems, r.patch_bytes());
    println!("dictionary,{},{}", r.dict_elems, r.dict_bytes());
    println!("dominance_ratio,{:.4},", r.dominance_ratio);
    Ok(())
}
