use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use s2dloc::config::RunConfig;
use s2dloc::io::{format_recall_table, format_results, parse_results, read_poses, write_bytes};
use s2dloc::matching::{correlate, correlate_batch, ratio_test};
use s2dloc::pipeline::{evaluate_recall, localize_all, RecallReport, DEFAULT_THRESHOLDS};
use s2dloc::pose::{ransac_pnp, solve_p3p};
use s2dloc::retrieval::{apply_pca, fit_pca, GlobalDescriptor};
use s2dloc::synth::{
    gen_feature_tensors, gen_pnp_problem, gen_scene_with, random_unit_descriptors, random_unit_grid, BackgroundMode,
    NoiseSpec, SceneParams,
};
use s2dloc::Error;

use crate::data::{self, DB_MANIFEST, QUERY_LIST, REFERENCES_MANIFEST, RUN_CONFIG};
use crate::{Background, BenchArgs, BuildDbArgs, CliError, EvaluateArgs, LocalizeArgs, SynthArgs};

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_bytes(&dir.join(RUN_CONFIG), cfg.to_text().as_bytes())?;
    Ok(())
}

pub fn synth(a: &SynthArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let params = SceneParams {
        num_landmarks: a.landmarks,
        num_refs: a.refs,
        num_queries: a.queries,
        extent: [a.extent; 3],
        image_dims: (a.width, a.height),
        focal_px: a.focal,
        ..SceneParams::default()
    };
    let noise = NoiseSpec {
        descriptor_noise_sigma: a.noise_sigma,
        outlier_fraction: a.outlier_fraction,
        background_mode: match a.background {
            Background::Orthogonal => BackgroundMode::Orthogonal,
            Background::RandomUnit => BackgroundMode::RandomUnit,
        },
    };
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    noise.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let scene = gen_scene_with(a.seed, &params)?;
    let tensors = gen_feature_tensors(&scene, a.stride, a.channels, &noise)?;
    data::write_scene(&a.out, &tensors)?;
    echo_config(&a.out, cfg)?;
    log::info!(
        "wrote {} references and {} queries to {}",
        tensors.references.len(),
        tensors.queries.len(),
        a.out.display()
    );
    println!(
        "{}: {} references, {} queries ({} and {})",
        a.out.display(),
        tensors.references.len(),
        tensors.queries.len(),
        REFERENCES_MANIFEST,
        QUERY_LIST
    );
    Ok(())
}

pub fn build_db(a: &BuildDbArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let loaded = data::load_manifest(&a.manifest)?;
    let refs = loaded.references;
    if refs.is_empty() {
        return Err(Error::EmptyDatabase.into());
    }
    let raw: Vec<&[f32]> = refs.iter().map(|r| r.raw_global.as_slice()).collect();
    let dim = raw[0].len();
    let out_dim = cfg.pca_dim.min(refs.len().saturating_sub(1)).min(dim);
    if out_dim < cfg.pca_dim {
        log::info!("pca_dim {} clamped to {out_dim}", cfg.pca_dim);
    }
    let pca = fit_pca(&raw, out_dim.max(1))?;
    let projected: Vec<GlobalDescriptor> = raw.iter().map(|g| apply_pca(&pca, g)).collect::<Result<_, _>>()?;
    // rejects duplicate ids and mixed local dimensions
    s2dloc::pipeline::ReferenceDatabase::new(refs.iter().map(|r| r.entry.clone()).collect())?;
    data::write_database(&a.out, &refs, &pca, &projected)?;
    echo_config(&a.out, cfg)?;
    println!(
        "{}: {} references, global descriptors {} -> {}",
        a.out.join(DB_MANIFEST).display(),
        refs.len(),
        dim,
        pca.out_dim()
    );
    Ok(())
}

pub fn localize(a: &LocalizeArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let db = data::load_database(&a.db)?;
    let queries = data::load_queries(&a.queries, db.pca.as_ref())?;
    let results = localize_all(&queries, &db.db, &cfg.localizer())?;
    write_bytes(&a.out, format_results(&results)?.as_bytes())?;
    echo_config(a.out.parent().unwrap_or(Path::new("")), cfg)?;
    let localized = results.iter().filter(|r| r.pose.is_some()).count();
    println!("localized {localized}/{} -> {}", results.len(), a.out.display());
    if localized == 0 {
        return Err(CliError::NothingLocalized { total: results.len() });
    }
    Ok(())
}

fn report_json(r: &RecallReport) -> serde_json::Value {
    let thresholds: Vec<serde_json::Value> = r
        .thresholds
        .iter()
        .zip(&r.recalls)
        .map(|((m, d), recall)| serde_json::json!({ "position_m": m, "rotation_deg": d, "recall_percent": recall }))
        .collect();
    serde_json::json!({ "thresholds": thresholds, "localized": r.localized, "total": r.total })
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let results = parse_results(&a.results, &fs::read_to_string(&a.results)?)?;
    let gt: HashMap<_, _> = read_poses(&a.gt)?.into_iter().collect();
    let report = evaluate_recall(&results, &gt, &DEFAULT_THRESHOLDS)?;
    print!("{}", format_recall_table(&report));
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&report_json(&report)).expect("report serializes");
        write_bytes(path, format!("{text}\n").as_bytes())?;
    }
    Ok(())
}

pub fn bench(a: &BenchArgs, cfg: &RunConfig) -> Result<(), CliError> {
    if a.descriptors == 0 || a.pnp_problems == 0 {
        return Err(CliError::Usage(
            "--descriptors and --pnp-problems must be positive".into(),
        ));
    }
    let grid = random_unit_grid(a.seed, a.width, a.height, a.channels)?;
    let descs = random_unit_descriptors(a.seed, a.descriptors, a.channels);

    let t = Instant::now();
    correlate(&grid, &descs[0])?;
    let single = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let maps = correlate_batch(&grid, &descs)?;
    let corr = t.elapsed().as_secs_f64();

    let ratio = cfg.localizer().ratio;
    let t = Instant::now();
    let accepted = maps.iter().filter(|m| ratio_test(m, &ratio).accepted).count();
    let ratio_time = t.elapsed().as_secs_f64();

    let problems = (0..a.pnp_problems)
        .map(|i| gen_pnp_problem(a.seed.wrapping_add(i), 100, 0.4, 0.5))
        .collect::<Result<Vec<_>, _>>()?;
    let t = Instant::now();
    let mut p3p_calls = 0usize;
    for p in &problems {
        let inl: Vec<_> = p
            .correspondences
            .iter()
            .zip(&p.outlier)
            .filter(|(_, &o)| !o)
            .map(|(c, _)| c)
            .collect();
        for w in inl.windows(3) {
            let _ = solve_p3p(w[0], w[1], w[2], &p.intrinsics);
            p3p_calls += 1;
        }
    }
    let p3p = t.elapsed().as_secs_f64();
    let ransac = cfg.localizer().ransac;
    let t = Instant::now();
    let mut solved = 0;
    for p in &problems {
        if ransac_pnp(&p.correspondences, &p.intrinsics, &ransac)?
            .estimate()
            .is_some()
        {
            solved += 1;
        }
    }
    let pnp = t.elapsed().as_secs_f64();

    let n = descs.len() as f64;
    let threads = rayon::current_num_threads();
    println!(
        "grid {}x{}x{}, {} descriptors, {} thread(s)",
        a.width,
        a.height,
        a.channels,
        descs.len(),
        threads
    );
    println!("{:<22}{:>12}{:>22}", "stage", "total ms", "per item");
    println!(
        "{:<22}{:>12.1}{:>16.3} ms/desc",
        "Correspondence Maps",
        corr * 1e3,
        corr * 1e3 / n
    );
    println!(
        "{:<22}{:>12.1}{:>16.3} ms/desc",
        "Ratio Test",
        ratio_time * 1e3,
        ratio_time * 1e3 / n
    );
    println!(
        "{:<22}{:>12.1}{:>16.3} ms/query",
        "PnP Solving",
        pnp * 1e3,
        pnp * 1e3 / problems.len() as f64
    );
    println!("single correlate {:.1} ms; batch {:.0} desc/s", single * 1e3, n / corr);
    println!(
        "P3P {:.2} us/call ({p3p_calls} calls); RANSAC solved {solved}/{}; ratio test accepted {accepted}/{}",
        p3p * 1e6 / p3p_calls.max(1) as f64,
        problems.len(),
        descs.len()
    );
    Ok(())
}
