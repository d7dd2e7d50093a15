//! Tiled filtering engine.
//!
//! The `H x W x C` volume of the filtering stage (`C = k^2` taps) is cut into
//! block-tasks of `nx x ny x nz`. Block-tasks sharing an `(x, y)` tile run on
//! one pool worker in ascending `z` order, carrying the tile's partial sums
//! from one z-block to the next, so every pixel accumulates its taps in the
//! same ascending order as [`apply_filters`](crate::dictionary::apply_filters)
//! and the result is bit-identical for any tiling and worker count.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Abstract GPU resources used by the cost model and the feasibility
/// constraints, plus the emulation's worker count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HardwareSpec {
    /// Streaming multiprocessors (`S`).
    pub sm_count: usize,
    /// Processing blocks per SM (`P`).
    pub blocks_per_sm: usize,
    /// Register file per processing block, in 32-bit elements (`R`).
    pub register_file: usize,
    /// Threads per warp (`WS`).
    pub warp_size: usize,
    /// Active warps per processing block (`T_sm`).
    pub max_warps: usize,
    /// Worker threads used to emulate block execution.
    pub workers: usize,
}

impl Default for HardwareSpec {
    /// Six SMs of four processing blocks, 64 KB register files, 32-thread
    /// warps, four active warps.
    fn default() -> Self {
        let mut spec = HardwareSpec {
            sm_count: 6,
            blocks_per_sm: 4,
            register_file: 64 * 1024 / 4,
            warp_size: 32,
            max_warps: 4,
            workers: 1,
        };
        spec.workers = spec.default_workers();
        spec
    }
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.sm_count,
            self.blocks_per_sm,
            self.register_file,
            self.warp_size,
            self.max_warps,
            self.workers,
        ];
        if fields.contains(&0) {
            return Err(Error::invalid(format!("hardware fields must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `min(S * P, available parallelism)`.
    pub fn default_workers(&self) -> usize {
        let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
        (self.sm_count * self.blocks_per_sm).min(avail).max(1)
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    /// Concurrent block slots, `S * P`.
    pub fn slots(&self) -> usize {
        self.sm_count * self.blocks_per_sm
    }
}

/// Extents of the filtering volume: output rows, columns and taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VolumeDims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl VolumeDims {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        VolumeDims { h, w, c }
    }

    pub fn volume(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn of(t: &Tensor) -> Self {
        VolumeDims::new(t.h(), t.w(), t.c())
    }
}

/// Block extents along rows, columns and taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockConfig {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl BlockConfig {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        BlockConfig { nx, ny, nz }
    }

    pub fn threads(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn fits(&self, dims: VolumeDims) -> bool {
        (1..=dims.h).contains(&self.nx)
            && (1..=dims.w).contains(&self.ny)
            && (1..=dims.c).contains(&self.nz)
    }

    /// Number of block-tasks covering `dims` (ragged edges included).
    pub fn grid(&self, dims: VolumeDims) -> (usize, usize, usize) {
        (
            dims.h.div_ceil(self.nx),
            dims.w.div_ceil(self.ny),
            dims.c.div_ceil(self.nz),
        )
    }

    pub fn block_count(&self, dims: VolumeDims) -> usize {
        let (gx, gy, gz) = self.grid(dims);
        gx * gy * gz
    }

    fn clamped(&self, dims: VolumeDims) -> BlockConfig {
        BlockConfig::new(
            self.nx.clamp(1, dims.h),
            self.ny.clamp(1, dims.w),
            self.nz.clamp(1, dims.c),
        )
    }
}

impl fmt::Display for BlockConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.nx, self.ny, self.nz)
    }
}

impl FromStr for BlockConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("block config '{s}' is not NX,NY,NZ")))?;
        match parts[..] {
            [nx, ny, nz] if nx > 0 && ny > 0 && nz > 0 => Ok(BlockConfig::new(nx, ny, nz)),
            _ => Err(Error::invalid(format!("block config '{s}' is not NX,NY,NZ"))),
        }
    }
}

fn pool(workers: usize) -> Result<Arc<ThreadPool>> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    if let Some(p) = pools.get(&workers) {
        return Ok(Arc::clone(p));
    }
    let p = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .thread_name(|i| format!("srde-engine-{i}"))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {workers} workers: {e}")))?;
    let p = Arc::new(p);
    pools.insert(workers, Arc::clone(&p));
    Ok(p)
}

fn check_operands(f: &Tensor, b: &Tensor) -> Result<()> {
    f.require_single_batch("run_filtering")?;
    if !f.same_dims(b) {
        return Err(Error::shape(format!(
            "filters {:?} and patches {:?} differ",
            f.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Filters `b` with per-pixel filters `f` on the worker pool.
///
/// `cfg` must fit inside the data volume; see [`run_filtering_with`] to
/// clamp oversized configurations instead.
pub fn run_filtering(f: &Tensor, b: &Tensor, cfg: BlockConfig, spec: &HardwareSpec) -> Result<Tensor> {
    run_filtering_with(f, b, cfg, spec, false)
}

/// [`run_filtering`] with an override that clamps out-of-range extents.
pub fn run_filtering_with(
    f: &Tensor,
    b: &Tensor,
    cfg: BlockConfig,
    spec: &HardwareSpec,
    clamp_to_data: bool,
) -> Result<Tensor> {
    Ok(execute(f, b, cfg, spec, clamp_to_data, false)?.0)
}

/// Instrumented run: also returns how many times each output element was
/// written. Every count is 1 in a correct execution.
pub fn run_filtering_traced(
    f: &Tensor,
    b: &Tensor,
    cfg: BlockConfig,
    spec: &HardwareSpec,
) -> Result<(Tensor, Vec<u32>)> {
    let (out, writes) = execute(f, b, cfg, spec, false, true)?;
    Ok((out, writes.unwrap_or_default()))
}

fn execute(
    f: &Tensor,
    b: &Tensor,
    cfg: BlockConfig,
    spec: &HardwareSpec,
    clamp_to_data: bool,
    count_writes: bool,
) -> Result<(Tensor, Option<Vec<u32>>)> {
    check_operands(f, b)?;
    spec.validate()?;
    let dims = VolumeDims::of(f);
    let cfg = if cfg.fits(dims) {
        cfg
    } else if clamp_to_data {
        cfg.clamped(dims)
    } else {
        return Err(Error::Infeasible(format!(
            "block {cfg} exceeds data {}x{}x{}",
            dims.h, dims.w, dims.c
        )));
    };
    let (gx, gy, gz) = cfg.grid(dims);
    let (h, w, c) = (dims.h, dims.w, dims.c);
    let hw = h * w;
    let fd = f.data();
    let bd = b.data();

    let run_tile = |tile: usize| -> Vec<f32> {
        let (tx, ty) = (tile / gy, tile % gy);
        let (r0, r1) = (tx * cfg.nx, ((tx + 1) * cfg.nx).min(h));
        let (c0, c1) = (ty * cfg.ny, ((ty + 1) * cfg.ny).min(w));
        let cols = c1 - c0;
        let mut acc = vec![0.0f32; (r1 - r0) * cols];
        for zb in 0..gz {
            let (z0, z1) = (zb * cfg.nz, ((zb + 1) * cfg.nz).min(c));
            for z in z0..z1 {
                let fz = &fd[z * hw..(z + 1) * hw];
                let bz = &bd[z * hw..(z + 1) * hw];
                for r in r0..r1 {
                    let row = &mut acc[(r - r0) * cols..(r - r0 + 1) * cols];
                    let fr = &fz[r * w + c0..r * w + c1];
                    let br = &bz[r * w + c0..r * w + c1];
                    for ((a, &fv), &bv) in row.iter_mut().zip(fr).zip(br) {
                        *a += fv * bv;
                    }
                }
            }
        }
        acc
    };

    let tiles = gx * gy;
    let partials: Vec<Vec<f32>> = if spec.workers == 1 {
        (0..tiles).map(run_tile).collect()
    } else {
        pool(spec.workers)?.install(|| (0..tiles).into_par_iter().map(run_tile).collect())
    };

    let mut out = Tensor::zeros(1, 1, h, w);
    let mut writes = count_writes.then(|| vec![0u32; hw]);
    let y = out.data_mut();
    for (tile, acc) in partials.iter().enumerate() {
        let (tx, ty) = (tile / gy, tile % gy);
        let (r0, r1) = (tx * cfg.nx, ((tx + 1) * cfg.nx).min(h));
        let (c0, c1) = (ty * cfg.ny, ((ty + 1) * cfg.ny).min(w));
        let cols = c1 - c0;
        for r in r0..r1 {
            y[r * w + c0..r * w + c1].copy_from_slice(&acc[(r - r0) * cols..(r - r0 + 1) * cols]);
            if let Some(wc) = writes.as_mut() {
                for v in &mut wc[r * w + c0..r * w + c1] {
                    *v += 1;
                }
            }
        }
    }
    Ok((out, writes))
}

/// Wall-clock timing of a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyMeasurement {
    pub median_ms: f64,
    pub runs: Vec<f64>,
    pub config: BlockConfig,
}

impl LatencyMeasurement {
    pub fn csv_header(repeats: usize) -> String {
        let runs: Vec<String> = (0..repeats).map(|i| format!("run_{i}")).collect();
        format!("nx,ny,nz,{},median_ms", runs.join(","))
    }

    pub fn csv_row(&self) -> String {
        let runs: Vec<String> = self.runs.iter().map(|r| format!("{r:.4}")).collect();
        format!("{},{},{:.4}", self.config, runs.join(","), self.median_ms)
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty list");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// One warm-up run, then `repeats` timed runs; reports the median.
pub fn measure_latency(
    f: &Tensor,
    b: &Tensor,
    cfg: BlockConfig,
    spec: &HardwareSpec,
    repeats: usize,
) -> Result<LatencyMeasurement> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    run_filtering(f, b, cfg, spec)?;
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = run_filtering(f, b, cfg, spec)?;
        runs.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    Ok(LatencyMeasurement {
        median_ms: median(&runs),
        runs,
        config: cfg,
    })
}

/// Deterministic latency model in arbitrary units:
///
/// ```text
/// blocks = ceil(H/nx) * ceil(W/ny) * ceil(C/nz)
/// waves  = ceil(blocks / (S*P))
/// warps  = ceil(nx*ny*nz / WS)
/// waste  = nx*ny*nz*blocks / (H*W*C)
/// cost   = waves * warps * WS * waste + 0.05 * blocks
/// ```
pub fn synthetic_cost(cfg: BlockConfig, dims: VolumeDims, spec: &HardwareSpec) -> Result<f64> {
    spec.validate()?;
    if !cfg.fits(dims) {
        return Err(Error::Infeasible(format!(
            "block {cfg} exceeds data {}x{}x{}",
            dims.h, dims.w, dims.c
        )));
    }
    let blocks = cfg.block_count(dims);
    let waves = blocks.div_ceil(spec.slots());
    let warps = cfg.threads().div_ceil(spec.warp_size);
    let waste = (cfg.threads() * blocks) as f64 / dims.volume() as f64;
    Ok((waves * warps * spec.warp_size) as f64 * waste + 0.05 * blocks as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::apply_filters;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(1, c, h, w, (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
            .unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u32> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn whole_and_column_blocks_match_reference() {
        let mut rng = Rng::new(1);
        let (f, b) = (random(&mut rng, 9, 7, 5), random(&mut rng, 9, 7, 5));
        let reference = bits(&apply_filters(&f, &b).unwrap());
        let spec = HardwareSpec::default().with_workers(2);
        for cfg in [BlockConfig::new(7, 5, 9), BlockConfig::new(1, 1, 9)] {
            assert_eq!(bits(&run_filtering(&f, &b, cfg, &spec).unwrap()), reference);
        }
    }

    #[test]
    fn ragged_tiles_across_workers() {
        let mut rng = Rng::new(2);
        let (f, b) = (random(&mut rng, 9, 8, 8), random(&mut rng, 9, 8, 8));
        let reference = bits(&apply_filters(&f, &b).unwrap());
        for workers in [1, 2, 4, 8] {
            let spec = HardwareSpec::default().with_workers(workers);
            let (out, writes) =
                run_filtering_traced(&f, &b, BlockConfig::new(3, 3, 2), &spec).unwrap();
            assert_eq!(bits(&out), reference, "workers = {workers}");
            assert!(writes.iter().all(|&n| n == 1));
        }
    }

    #[test]
    fn out_of_bounds_config() {
        let mut rng = Rng::new(3);
        let (f, b) = (random(&mut rng, 4, 3, 3), random(&mut rng, 4, 3, 3));
        let spec = HardwareSpec::default().with_workers(1);
        let big = BlockConfig::new(4, 1, 1);
        assert!(matches!(run_filtering(&f, &b, big, &spec), Err(Error::Infeasible(_))));
        let clamped = run_filtering_with(&f, &b, big, &spec, true).unwrap();
        assert_eq!(bits(&clamped), bits(&apply_filters(&f, &b).unwrap()));
        assert!(run_filtering(&f, &random(&mut rng, 4, 3, 2), BlockConfig::new(1, 1, 1), &spec)
            .is_err());
    }

    #[test]
    fn latency_bookkeeping() {
        let mut rng = Rng::new(4);
        let (f, b) = (random(&mut rng, 9, 16, 16), random(&mut rng, 9, 16, 16));
        let spec = HardwareSpec::default().with_workers(1);
        let cfg = BlockConfig::new(4, 16, 9);
        let one = measure_latency(&f, &b, cfg, &spec, 1).unwrap();
        assert_eq!(one.runs.len(), 1);
        assert_eq!(one.median_ms, one.runs[0]);
        let five = measure_latency(&f, &b, cfg, &spec, 5).unwrap();
        assert_eq!(five.runs.len(), 5);
        assert_eq!(five.median_ms, median(&five.runs));
        assert!(measure_latency(&f, &b, cfg, &spec, 0).is_err());
        assert_eq!(LatencyMeasurement::csv_header(2), "nx,ny,nz,run_0,run_1,median_ms");
        assert!(one.csv_row().starts_with("4,16,9,"));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn synthetic_cost_plug_in() {
        // 8x8x4 volume, 16 blocks of 4x2x2 = 16 threads: one wave, one warp
        let spec = HardwareSpec {
            sm_count: 4,
            blocks_per_sm: 4,
            register_file: 64,
            warp_size: 16,
            max_warps: 4,
            workers: 1,
        };
        let dims = VolumeDims::new(8, 8, 4);
        let cost = synthetic_cost(BlockConfig::new(4, 2, 2), dims, &spec).unwrap();
        assert_eq!(cost, 16.0 + 0.05 * 16.0);
        // halving nz doubles the blocks: two waves, still one (half-full) warp
        let cost = synthetic_cost(BlockConfig::new(4, 2, 1), dims, &spec).unwrap();
        assert_eq!(cost, 2.0 * 16.0 * 1.0 + 0.05 * 32.0);
        assert!(synthetic_cost(BlockConfig::new(9, 1, 1), dims, &spec).is_err());
    }

    #[test]
    fn block_config_parsing() {
        assert_eq!("3, 4,5".parse::<BlockConfig>().unwrap(), BlockConfig::new(3, 4, 5));
        assert!("3,4".parse::<BlockConfig>().is_err());
        assert!("0,1,1".parse::<BlockConfig>().is_err());
        assert_eq!(BlockConfig::new(1, 2, 3).to_string(), "1,2,3");
    }
}
