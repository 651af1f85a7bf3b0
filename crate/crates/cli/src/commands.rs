use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ntc_core::autodiff::Tensor;
use ntc_core::codec;
use ntc_core::diagnostics::{
    boundary_pixels, detect_bin_oscillation, extract_partition_2d, extract_quantizer_1d, jacobian_orthogonality,
    median, partition_cell_moments, random_matrix_scores, vq_partition_2d, vq_quantizer_1d,
};
use ntc_core::oracles::{blahut_arimoto, sullivan_ecsq, BaGrid, QuantizerDescription};
use ntc_core::rd::RdPoint;
use ntc_core::sources::{stream_rng, SourceSpec, Stream};
use ntc_core::training::{
    eval_operational_rd, hard_samples, select_offset_grid, train_multirate, train_ntc, write_metrics_csv, NtcModel,
    OperationMode, Proxy, TrainConfig, TrainReport,
};
use ntc_core::vecvq::{default_codebook_size, eval_rd, train_vecvq};

use crate::artifacts::ArtifactDir;
use crate::config::{self, CodecRun, DiagnoseRun, Method, MultirateRun, NtcRun, Scan, SweepRun, VecvqRun};
use crate::error::{CliError, CliResult};

/// Flags shared by every subcommand.
pub struct Options<'a> {
    pub config: &'a Path,
    pub out_dir: &'a Path,
    pub threads: usize,
    pub seed_override: Option<u64>,
    /// Parse and validate the config without running anything.
    pub check: bool,
}

pub const RD_HEADER: &str = "# rd v1\nmethod,lambda,rate,distortion,lagrangian,lagrangian_se\n";

fn rd_row(method: &str, p: &RdPoint) -> String {
    format!(
        "{method},{},{},{},{},{}\n",
        p.lambda,
        p.rate,
        p.distortion,
        p.lagrangian(),
        p.lagrangian_se
    )
}

fn metrics_csv(report: &TrainReport) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(report, &mut buf)?;
    Ok(buf)
}

/// Runs `f` on job indices `0..jobs` with `threads` workers; results keep
/// job order.
pub fn run_pool<T: Send>(jobs: usize, threads: usize, f: impl Fn(usize) -> CliResult<T> + Sync) -> CliResult<Vec<T>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<T>>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                results.lock().expect("pool results")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("pool results")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn quantizer_csv(desc: &QuantizerDescription) -> String {
    let mut s = String::from("# quantizer_1d v1\nkind,position,probability\n");
    if let QuantizerDescription::OneD {
        boundaries,
        codevectors,
        pmf,
        ..
    } = desc
    {
        for b in boundaries {
            s.push_str(&format!("boundary,{b},\n"));
        }
        for (c, p) in codevectors.iter().zip(pmf) {
            s.push_str(&format!("codevector,{c},{p}\n"));
        }
    }
    s
}

fn partition_csvs(desc: &QuantizerDescription) -> (String, String) {
    let mut grid = String::from("# partition_2d v1\nix,iy,x,y,label,boundary\n");
    let mut cv = String::from("# codevectors v1\nlabel,x,y,probability\n");
    if let QuantizerDescription::TwoD {
        bounds,
        nx,
        ny,
        labels,
        codevectors,
        pmf,
        ..
    } = desc
    {
        let edge = boundary_pixels(desc).expect("two-dimensional");
        let wx = (bounds[1] - bounds[0]) / *nx as f64;
        let wy = (bounds[3] - bounds[2]) / *ny as f64;
        for j in 0..*ny {
            for i in 0..*nx {
                let p = j * nx + i;
                grid.push_str(&format!(
                    "{i},{j},{},{},{},{}\n",
                    bounds[0] + (i as f64 + 0.5) * wx,
                    bounds[2] + (j as f64 + 0.5) * wy,
                    labels[p],
                    u8::from(edge[p])
                ));
            }
        }
        for (c, p) in pmf.iter().enumerate() {
            cv.push_str(&format!("{c},{},{},{p}\n", codevectors[2 * c], codevectors[2 * c + 1]));
        }
    }
    (grid, cv)
}

fn apply_seed(schedule_seed: &mut u64, eval_seed: &mut u64, o: &Options) {
    if let Some(s) = o.seed_override {
        *schedule_seed = s;
        *eval_seed = s.wrapping_add(1);
    }
}

pub fn train_vecvq_cmd(o: &Options) -> CliResult<()> {
    let mut c: VecvqRun = config::load(o.config)?;
    apply_seed(&mut c.schedule.seed, &mut c.eval_seed, o);
    c.source.validate()?;
    c.schedule.validate()?;
    if o.check {
        return Ok(());
    }
    let k = c.codebook_size.unwrap_or_else(|| default_codebook_size(&c.source));
    let (model, report) = train_vecvq(&c.source, c.lambda, k, &c.schedule)?;
    let mut dir = ArtifactDir::create(o.out_dir)?;
    dir.write("model.ntcm", &model.to_bytes()?)?;
    dir.write("metrics.csv", &metrics_csv(&report)?)?;
    let p = eval_rd(&model, &c.source, c.eval_samples, c.eval_seed)?;
    dir.write("rd.csv", format!("{RD_HEADER}{}", rd_row("vecvq", &p)).as_bytes())?;
    if let Some(scan) = &c.scan {
        match model.dim() {
            1 => dir.write("quantizer.csv", quantizer_csv(&vq_quantizer_1d(&model, scan.range()?, scan.resolution)?).as_bytes())?,
            2 => {
                let (grid, cv) = partition_csvs(&vq_partition_2d(&model, scan.bounds()?, scan.resolution)?);
                dir.write("partition.csv", grid.as_bytes())?;
                dir.write("codevectors.csv", cv.as_bytes())?;
            }
            _ => return Err(CliError::config("scans need one- or two-dimensional sources")),
        }
    }
    let seeds = [("train", c.schedule.seed), ("eval", c.eval_seed)];
    dir.finish(&config::to_toml(&c)?, &seeds)?;
    Ok(())
}

fn transforms_csv(model: &NtcModel, range: [f64; 2], points: usize) -> CliResult<String> {
    let xs: Vec<f64> = (0..=points)
        .map(|i| range[0] + (range[1] - range[0]) * i as f64 / points as f64)
        .collect();
    let x = Tensor::new(vec![xs.len(), 1], xs.clone())?;
    let y = model.analyze(&x, model.lambda)?;
    let ys: Vec<f64> = {
        let (lo, hi) = y
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        (0..=points).map(|i| lo + (hi - lo) * i as f64 / points as f64).collect()
    };
    let xh = model.synthesize(&Tensor::new(vec![ys.len(), 1], ys.clone())?, model.lambda)?;
    let mut s = String::from("# curve v1\nseries,x,y\n");
    for (a, b) in xs.iter().zip(y.data()) {
        s.push_str(&format!("analysis,{a},{b}\n"));
    }
    for (a, b) in ys.iter().zip(xh.data()) {
        s.push_str(&format!("synthesis,{a},{b}\n"));
    }
    Ok(s)
}

fn write_scan(dir: &mut ArtifactDir, model: &NtcModel, scan: &Scan) -> CliResult<()> {
    match model.source_dim() {
        1 => {
            let range = scan.range()?;
            let desc = extract_quantizer_1d(model, range, scan.resolution)?;
            dir.write("quantizer.csv", quantizer_csv(&desc).as_bytes())?;
            let report = detect_bin_oscillation(&desc)?;
            let mut s = String::from("# oscillation v1\nlevel,crossings,flagged\n");
            for (level, count) in &report.crossings {
                s.push_str(&format!("{level},{count},{}\n", u8::from(*count > 1)));
            }
            dir.write("oscillation.csv", s.as_bytes())?;
            dir.write("transforms.csv", transforms_csv(model, range, 400)?.as_bytes())?;
        }
        2 => {
            let desc = extract_partition_2d(model, scan.bounds()?, scan.resolution)?;
            let (grid, cv) = partition_csvs(&desc);
            dir.write("partition.csv", grid.as_bytes())?;
            dir.write("codevectors.csv", cv.as_bytes())?;
            let moments = partition_cell_moments(&desc)?;
            let mut s = String::from("# cell_moments v1\nlabel,moment\n");
            for (c, m) in moments.iter().enumerate() {
                if let Some(m) = m {
                    s.push_str(&format!("{c},{m}\n"));
                }
            }
            dir.write("moments.csv", s.as_bytes())?;
        }
        _ => return Err(CliError::config("scans need one- or two-dimensional models")),
    }
    Ok(())
}

fn offset_curve_csv(model: &NtcModel, c: &TrainConfig) -> CliResult<String> {
    let search = select_offset_grid(model, &c.source, model.lambda, c.offset_grid, c.offset_samples, c.schedule.seed)?;
    let mut s = String::from("# curve v1\nseries,x,y\n");
    for (d, curve) in search.curves.iter().enumerate() {
        for p in curve {
            s.push_str(&format!("dim{d},{},{}\n", p.offset, p.lagrangian));
        }
    }
    Ok(s)
}

pub fn train_ntc_cmd(o: &Options) -> CliResult<()> {
    let mut c: NtcRun = config::load(o.config)?;
    apply_seed(&mut c.train.schedule.seed, &mut c.eval_seed, o);
    c.train.validate()?;
    if o.check {
        return Ok(());
    }
    let (model, report) = train_ntc(&c.train)?;
    let mut dir = ArtifactDir::create(o.out_dir)?;
    dir.write("model.ntcm", &model.to_bytes()?)?;
    dir.write("metrics.csv", &metrics_csv(&report)?)?;
    let name = format!("ntc_{}", c.train.proxy.name());
    let fixed = eval_operational_rd(
        &model,
        &c.train.source,
        &OperationMode::FixedOffset {
            offset: model.offset.clone(),
        },
        model.lambda,
        c.eval_samples,
        c.eval_seed,
    )?;
    let dithered = eval_operational_rd(&model, &c.train.source, &OperationMode::Dithered, model.lambda, c.eval_samples, c.eval_seed)?;
    let rd = format!("{RD_HEADER}{}{}", rd_row(&name, &fixed), rd_row(&format!("{name}_dithered"), &dithered));
    dir.write("rd.csv", rd.as_bytes())?;
    dir.write("offset_curve.csv", offset_curve_csv(&model, &c.train)?.as_bytes())?;
    if let Some(scan) = &c.scan {
        write_scan(&mut dir, &model, scan)?;
    }
    let seeds = [("train", c.train.schedule.seed), ("eval", c.eval_seed)];
    dir.finish(&config::to_toml(&c)?, &seeds)?;
    Ok(())
}

pub fn train_multirate_cmd(o: &Options) -> CliResult<()> {
    let mut c: MultirateRun = config::load(o.config)?;
    apply_seed(&mut c.train.schedule.seed, &mut c.eval_seed, o);
    if c.eval_lambdas.is_empty() {
        return Err(CliError::config("eval_lambdas must not be empty"));
    }
    c.train.validate()?;
    if c.train.lambda_range.is_none() {
        return Err(CliError::config("train.lambda_range is required"));
    }
    if o.check {
        return Ok(());
    }
    // Job 0 is the multirate model, the rest are per-lambda references.
    let jobs = 1 + if c.reference_models { c.eval_lambdas.len() } else { 0 };
    let trained = run_pool(jobs, o.threads, |i| {
        if i == 0 {
            Ok(train_multirate(&c.train)?)
        } else {
            let single = TrainConfig {
                lambda: c.eval_lambdas[i - 1],
                lambda_range: None,
                ..c.train.clone()
            };
            Ok(train_ntc(&single)?)
        }
    })?;
    let mut dir = ArtifactDir::create(o.out_dir)?;
    let (multi, report) = &trained[0];
    dir.write("model.ntcm", &multi.to_bytes()?)?;
    dir.write("metrics.csv", &metrics_csv(report)?)?;
    let mut rd = String::from(RD_HEADER);
    let variant = c.train.variant.name();
    for &l in &c.eval_lambdas {
        let mode = OperationMode::FixedOffset {
            offset: multi.offset.clone(),
        };
        let p = eval_operational_rd(multi, &c.train.source, &mode, l, c.eval_samples, c.eval_seed)?;
        rd.push_str(&rd_row(&format!("multirate_{variant}"), &p));
    }
    for (single, _) in trained.iter().skip(1) {
        let mode = OperationMode::FixedOffset {
            offset: single.offset.clone(),
        };
        let p = eval_operational_rd(single, &c.train.source, &mode, single.lambda, c.eval_samples, c.eval_seed)?;
        rd.push_str(&rd_row("single_lambda", &p));
    }
    dir.write("rd.csv", rd.as_bytes())?;
    let seeds = [("train", c.train.schedule.seed), ("eval", c.eval_seed)];
    dir.finish(&config::to_toml(&c)?, &seeds)?;
    Ok(())
}

enum SweepJob {
    Method(Method, f64),
}

pub fn sweep_rd_cmd(o: &Options) -> CliResult<()> {
    let mut c: SweepRun = config::load(o.config)?;
    if let Some(s) = o.seed_override {
        c.vecvq.schedule.seed = s;
        c.ntc.schedule.seed = s;
        c.eval_seed = s.wrapping_add(1);
    }
    c.source.validate()?;
    if c.lambdas.is_empty() || c.methods.is_empty() {
        return Err(CliError::config("lambdas and methods must not be empty"));
    }
    if c.methods.contains(&Method::Sullivan) && c.source != SourceSpec::Laplace {
        return Err(CliError::config("the sullivan reference exists only for the laplace source"));
    }
    c.vecvq.schedule.validate()?;
    c.ntc.schedule.validate()?;
    if o.check {
        return Ok(());
    }
    let mut methods = c.methods.clone();
    methods.dedup();
    let dithered_with_noise = methods.contains(&Method::NtcNoise) && methods.contains(&Method::NtcDithered);
    let jobs: Vec<SweepJob> = methods
        .iter()
        .filter(|m| !(dithered_with_noise && **m == Method::NtcDithered))
        .flat_map(|&m| c.lambdas.iter().map(move |&l| SweepJob::Method(m, l)))
        .collect();
    let mut dir = ArtifactDir::create(o.out_dir)?;
    std::fs::create_dir_all(dir.path("points"))?;
    let ba_grid = if methods.contains(&Method::Ba) {
        Some(BaGrid::for_source(&c.source)?)
    } else {
        None
    };
    let rows = run_pool(jobs.len(), o.threads, |i| {
        let SweepJob::Method(method, lambda) = jobs[i];
        let rows = sweep_point(&c, method, lambda, dithered_with_noise, ba_grid.as_ref())?;
        let text: String = rows.iter().map(|(m, p)| rd_row(m.name(), p)).collect();
        let file = dir.path(&format!("points/{}_{lambda}.csv", method.name()));
        crate::artifacts::write_atomic(&file, format!("{RD_HEADER}{text}").as_bytes())?;
        Ok(rows)
    })?;
    let mut all: Vec<(Method, RdPoint)> = rows.into_iter().flatten().collect();
    let order = |m: Method| methods.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    all.sort_by(|a, b| order(a.0).cmp(&order(b.0)).then(a.1.lambda.total_cmp(&b.1.lambda)));
    let text: String = all.iter().map(|(m, p)| rd_row(m.name(), p)).collect();
    dir.write("rd.csv", format!("{RD_HEADER}{text}").as_bytes())?;
    let seeds = [
        ("vecvq", c.vecvq.schedule.seed),
        ("ntc", c.ntc.schedule.seed),
        ("eval", c.eval_seed),
    ];
    dir.finish(&config::to_toml(&c)?, &seeds)?;
    Ok(())
}

fn sweep_point(
    c: &SweepRun,
    method: Method,
    lambda: f64,
    with_dithered: bool,
    ba: Option<&BaGrid>,
) -> CliResult<Vec<(Method, RdPoint)>> {
    let ntc_config = |proxy: Proxy, linear: bool| {
        let mut t = TrainConfig {
            source: c.source,
            lambda,
            proxy,
            arch: c.ntc.arch.clone(),
            schedule: c.ntc.schedule.clone(),
            offset_grid: c.ntc.offset_grid,
            offset_samples: c.ntc.offset_samples,
            ..Default::default()
        };
        t.arch.linear = linear;
        if let (Proxy::SoftAnnealed, Some(s)) = (proxy, c.ntc.soft_steps) {
            t.schedule.steps = s;
        }
        t
    };
    let fixed = |m: &NtcModel| OperationMode::FixedOffset {
        offset: m.offset.clone(),
    };
    Ok(match method {
        Method::Vecvq => {
            let k = c.vecvq.codebook_size.unwrap_or_else(|| default_codebook_size(&c.source));
            let (m, _) = train_vecvq(&c.source, lambda, k, &c.vecvq.schedule)?;
            vec![(method, eval_rd(&m, &c.source, c.eval_samples, c.eval_seed)?)]
        }
        Method::NtcNoise | Method::NtcDithered | Method::NtcSt | Method::NtcSoft | Method::Ltc => {
            let proxy = match method {
                Method::NtcSt => Proxy::StraightThrough,
                Method::NtcSoft => Proxy::SoftAnnealed,
                _ => Proxy::Noise,
            };
            let (m, _) = train_ntc(&ntc_config(proxy, method == Method::Ltc))?;
            let mut rows = Vec::new();
            if method != Method::NtcDithered {
                rows.push((method, eval_operational_rd(&m, &c.source, &fixed(&m), lambda, c.eval_samples, c.eval_seed)?));
            }
            if method == Method::NtcDithered || (method == Method::NtcNoise && with_dithered) {
                let p = eval_operational_rd(&m, &c.source, &OperationMode::Dithered, lambda, c.eval_samples, c.eval_seed)?;
                rows.push((Method::NtcDithered, p));
            }
            rows
        }
        Method::Sullivan => vec![(method, sullivan_ecsq(lambda)?.point)],
        Method::Ba => {
            let grid = ba.expect("grid built for ba sweeps");
            vec![(method, blahut_arimoto(grid, lambda, &c.ba)?.point)]
        }
    })
}

fn check_model_source(model: &Option<std::path::PathBuf>, train: &Option<TrainConfig>) -> CliResult<()> {
    match (model, train) {
        (Some(_), None) => Ok(()),
        (None, Some(t)) => Ok(t.validate()?),
        _ => Err(CliError::config("set exactly one of `model` and `train`")),
    }
}

fn model_from(config_path: &Path, model: &Option<std::path::PathBuf>, train: &Option<TrainConfig>) -> CliResult<NtcModel> {
    match (model, train) {
        (Some(p), None) => {
            let path = config::relative_to(config_path, p);
            let bytes = std::fs::read(&path)
                .map_err(|e| CliError::config(format!("cannot read model {}: {e}", path.display())))?;
            Ok(NtcModel::from_bytes(&bytes)?)
        }
        (None, Some(t)) => Ok(train_ntc(t)?.0),
        _ => Err(CliError::config("set exactly one of `model` and `train`")),
    }
}

fn source_for(train: &Option<TrainConfig>, model: &NtcModel) -> SourceSpec {
    match train {
        Some(t) => t.source,
        None if model.source_dim() == 1 => SourceSpec::Laplace,
        None => SourceSpec::banana(),
    }
}

pub fn diagnose_cmd(o: &Options) -> CliResult<()> {
    let mut c: DiagnoseRun = config::load(o.config)?;
    if let Some(s) = o.seed_override {
        c.seed = s;
        if let Some(t) = c.train.as_mut() {
            t.schedule.seed = s;
        }
    }
    check_model_source(&c.model, &c.train)?;
    if o.check {
        return Ok(());
    }
    let model = model_from(o.config, &c.model, &c.train)?;
    let mut dir = ArtifactDir::create(o.out_dir)?;
    write_scan(&mut dir, &model, &c.scan)?;
    if model.source_dim() == model.latent_dim() && model.source_dim() >= 2 {
        let source = source_for(&c.train, &model);
        let pts = source.sample_with(c.jacobian_points, &mut stream_rng(c.seed, Stream::Eval, 0));
        let scores = jacobian_orthogonality(&model, &pts)?;
        let mut s = String::from("# jacobians v1\npoint,x,y,synthesis_score\n");
        for (i, v) in scores.synthesis.iter().enumerate() {
            let p = pts.row(i);
            s.push_str(&format!("{i},{},{},{v}\n", p[0], p[1]));
        }
        dir.write("jacobians.csv", s.as_bytes())?;
        let baseline = random_matrix_scores(c.jacobian_points, model.source_dim(), c.seed);
        let summary = format!(
            "# jacobian_summary v1\nsynthesis_median,analysis_median,random_median,skipped\n{},{},{},{}\n",
            median(&scores.synthesis),
            median(&scores.analysis),
            median(&baseline),
            scores.skipped
        );
        dir.write("jacobian_summary.csv", summary.as_bytes())?;
    }
    let seeds = [("diagnose", c.seed)];
    dir.finish(&config::to_toml(&c)?, &seeds)?;
    Ok(())
}

pub fn codec_check_cmd(o: &Options) -> CliResult<()> {
    let mut c: CodecRun = config::load(o.config)?;
    if let Some(s) = o.seed_override {
        c.seed = s;
        if let Some(t) = c.train.as_mut() {
            t.schedule.seed = s;
        }
    }
    check_model_source(&c.model, &c.train)?;
    if o.check {
        return Ok(());
    }
    let model = model_from(o.config, &c.model, &c.train)?;
    let source = source_for(&c.train, &model);
    let x = source.sample_with(c.vectors, &mut stream_rng(c.seed, Stream::Eval, 0));
    let tables = codec::CodingTables::new(&model)?;
    let bytes = codec::compress_with(&model, &tables, &x)?;
    let decoded = codec::decompress_with(&model, &tables, &bytes)?;
    let k = tables.indices(&model, &x)?;
    let reference = model.decode_indices(&k, &model.offset, model.lambda)?;
    let identical = decoded == reference;
    let float_tables = model.pmf_tables(&model.offset)?;
    let y = model.analyze(&x, model.lambda)?;
    let modeled: f64 = hard_samples(&model, &x, &y, &model.offset, &float_tables, model.lambda)?
        .iter()
        .map(|(r, _)| r)
        .sum::<f64>()
        / c.vectors as f64;
    let coded = codec::payload_bits_per_vector(&bytes)?;
    let mut dir = ArtifactDir::create(o.out_dir)?;
    dir.write("payload.ntcb", &bytes)?;
    let report = format!(
        "# codec v1\nvectors,bytes,coded_bits_per_vector,modeled_bits_per_vector,reconstruction_identical\n{},{},{coded},{modeled},{}\n",
        c.vectors,
        bytes.len(),
        u8::from(identical)
    );
    dir.write("codec.csv", report.as_bytes())?;
    let seeds = [("data", c.seed)];
    dir.finish(&config::to_toml(&c)?, &seeds)?;
    if !identical {
        return Err(CliError::Numeric("decoded reconstruction differs from the evaluation path".into()));
    }
    Ok(())
}
