//! Command implementations behind the `psmpc` binary. Each returns the
//! process exit code.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scenario::{ScenarioError, ScenarioFile};
use crate::simulator::{evaluate_metrics, prepare, run_closed_loop, Metrics, Prepared, SimError, SimLog};
use crate::supervisor::Mode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_LEMMA2: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Lemma2(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Lemma2(_) => EXIT_LEMMA2,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Lemma2(m) => write!(f, "{m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Config(e.to_string()),
            SimError::Lemma2(_) => CliError::Lemma2(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("cannot write {}: {e}", path.display()))
}

fn write(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content).map_err(|e| io_err(path, e))
}

fn finish(r: Result<(), CliError>) -> i32 {
    match r {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_path: String,
    pub resolved_scenario: String,
    pub outputs: Vec<String>,
    pub content_hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub controller: Option<String>,
    pub mode: Option<Mode>,
}

pub fn load_with_overrides(path: &Path, ov: &RunOverrides) -> Result<ScenarioFile, CliError> {
    let mut f = ScenarioFile::load(path)?;
    if let Some(c) = &ov.controller {
        f.run.controller = c.clone();
    }
    if let Some(m) = ov.mode {
        f.run.mode = m;
    }
    if let Some(s) = ov.seed {
        f.set_seed(s);
    }
    Ok(f)
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

/// Runs one scenario and writes the log, metadata, plot data and manifest
/// under `out`.
pub fn run_to_dir(file: &ScenarioFile, scenario_path: &Path, out: &Path, prep: Option<&Prepared>) -> Result<(SimLog, Metrics), CliError> {
    let sc = file.resolve()?;
    let owned;
    let prep = match prep {
        Some(p) => p,
        None => {
            owned = prepare(&sc)?;
            &owned
        }
    };
    let mut log = run_closed_loop(&sc, prep)?;
    let hash = file.content_hash();
    log.meta.config_hash = Some(hash.clone());
    let metrics = evaluate_metrics(&log, &sc.energy, sc.dt_sim, &sc.x_set, &sc.u_set);
    create_dir(out)?;
    let mut outputs = Vec::new();
    let mut put = |name: &str, content: &str| -> Result<(), CliError> {
        write(&out.join(name), content)?;
        outputs.push(name.to_string());
        Ok(())
    };
    put("log.csv", &log.to_csv())?;
    #[derive(Serialize)]
    struct Meta<'a> {
        #[serde(flatten)]
        meta: &'a crate::simulator::SimMeta,
        metrics: &'a Metrics,
    }
    put("log.meta.json", &serde_json::to_string_pretty(&Meta { meta: &log.meta, metrics: &metrics }).unwrap())?;
    put("scenario.resolved.toml", &file.to_toml())?;
    for p in emit_plot_data(&log, out)? {
        outputs.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    let manifest = RunManifest {
        scenario_path: scenario_path.display().to_string(),
        resolved_scenario: "scenario.resolved.toml".into(),
        outputs,
        content_hash: hash,
    };
    write(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok((log, metrics))
}

pub fn cmd_run(scenario: &Path, out: &Path, ov: &RunOverrides) -> i32 {
    finish((|| {
        let f = load_with_overrides(scenario, ov)?;
        let (log, m) = run_to_dir(&f, scenario, out, None)?;
        println!(
            "{} {}: energy objective {:.6} MJ, {} switches, final |x| {:.3e}, {} rows -> {}",
            log.meta.selection,
            log.meta.mode,
            m.energy_total_j / 1e6,
            m.switches,
            m.final_state_norm,
            log.rows.len(),
            out.display()
        );
        Ok(())
    })())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub controller: String,
    pub id: String,
    pub mode: Mode,
    pub energy_mj: f64,
    pub switches: usize,
}

/// Every single controller plus pSMPC (when there is more than one
/// controller), in both modes.
pub fn compare(file: &ScenarioFile, scenario_path: &Path, out: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let mut jobs = Vec::new();
    for mode in [Mode::Nominal, Mode::Robust] {
        for c in &file.controllers {
            jobs.push((mode, format!("single:{}", c.id), c.name.clone(), c.id.to_string()));
        }
        if file.controllers.len() > 1 {
            jobs.push((mode, "pSMPC".to_string(), "pSMPC".to_string(), "-".to_string()));
        }
    }
    let mut preps = Vec::new();
    for mode in [Mode::Nominal, Mode::Robust] {
        let mut f = file.clone();
        f.run.mode = mode;
        preps.push(prepare(&f.resolve()?)?);
    }
    let rows: Vec<Result<SummaryRow, CliError>> = jobs
        .par_iter()
        .map(|(mode, sel, name, id)| {
            let mut f = file.clone();
            f.run.mode = *mode;
            f.run.controller = sel.clone();
            let dir = out.join(format!("{}_{}", mode, sel.replace(':', "_")));
            let prep = &preps[(*mode == Mode::Robust) as usize];
            let (_, m) = run_to_dir(&f, scenario_path, &dir, Some(prep))?;
            Ok(SummaryRow { controller: name.clone(), id: id.clone(), mode: *mode, energy_mj: m.energy_total_j / 1e6, switches: m.switches })
        })
        .collect();
    rows.into_iter().collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("controller,id,mode,energy_MJ,switches\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.controller, r.id, r.mode, r.energy_mj, r.switches);
    }
    s
}

/// Controller per row, one energy column per mode.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut names: Vec<(String, String)> = Vec::new();
    for r in rows {
        if !names.iter().any(|(n, _)| n == &r.controller) {
            names.push((r.controller.clone(), r.id.clone()));
        }
    }
    let cell = |name: &str, mode: Mode| {
        rows.iter()
            .find(|r| r.controller == name && r.mode == mode)
            .map_or("-".to_string(), |r| format!("{:.4}", r.energy_mj))
    };
    let mut s = format!("{:<12} {:>4} {:>14} {:>14}\n", "Controller", "ID", "Nominal [MJ]", "Robust [MJ]");
    for (n, id) in &names {
        let _ = writeln!(s, "{:<12} {:>4} {:>14} {:>14}", n, id, cell(n, Mode::Nominal), cell(n, Mode::Robust));
    }
    s
}

pub fn cmd_compare(scenario: &Path, out: &Path) -> i32 {
    finish((|| {
        let f = ScenarioFile::load(scenario)?;
        let rows = compare(&f, scenario, out)?;
        create_dir(out)?;
        write(&out.join("summary.csv"), &summary_csv(&rows))?;
        let table = summary_table(&rows);
        write(&out.join("summary.txt"), &table)?;
        print!("{table}");
        Ok(())
    })())
}

pub fn certify_text(prep: &Prepared) -> String {
    let mut s = String::new();
    for c in &prep.configs {
        let _ = writeln!(
            s,
            "controller {} ({}): DARE residual {:.3e}, MOAS t* = {}, terminal set rows = {}",
            c.id,
            c.name,
            c.kit.dare_residual,
            c.kit.t_star,
            c.kit.xn.num_rows()
        );
    }
    s.push_str(&prep.report.to_text());
    s
}

pub const DARE_RESIDUAL_TOL: f64 = 1e-9;

pub fn certificates_pass(prep: &Prepared) -> bool {
    prep.report.pass && prep.configs.iter().all(|c| c.kit.dare_residual <= DARE_RESIDUAL_TOL)
}

pub fn cmd_certify(scenario: &Path, out: Option<&Path>) -> i32 {
    let r = (|| -> Result<bool, CliError> {
        let f = ScenarioFile::load(scenario)?;
        let prep = prepare(&f.resolve()?)?;
        print!("{}", certify_text(&prep));
        if let Some(out) = out {
            create_dir(out)?;
            write(&out.join("certificates.json"), &prep.report.to_json())?;
        }
        Ok(certificates_pass(&prep))
    })();
    match r {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("error: certificates failed");
            EXIT_FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Energy deviation and switching traces as CSV plus standalone SVG.
pub fn emit_plot_data(log: &SimLog, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    create_dir(out)?;
    let mut files = Vec::new();
    let mut energy = String::from("t_s,dE_J\n");
    for r in &log.rows {
        let _ = writeln!(energy, "{},{}", r.t, r.de);
    }
    let ids = &log.meta.member_ids;
    let mut sw = String::from("t_s,sigma");
    for id in ids {
        let _ = write!(sw, ",perm_{id}");
    }
    sw.push('\n');
    for r in &log.rows {
        let _ = write!(sw, "{},{}", r.t, r.sigma);
        for p in &r.permission {
            let _ = write!(sw, ",{}", *p as u8);
        }
        sw.push('\n');
    }
    let e_series = vec![("dE [J]".to_string(), log.rows.iter().map(|r| (r.t, r.de)).collect())];
    let mut s_series = vec![("sigma".to_string(), log.rows.iter().map(|r| (r.t, r.sigma as f64)).collect::<Vec<_>>())];
    for (c, id) in ids.iter().enumerate() {
        s_series.push((format!("permission {id}"), log.rows.iter().map(|r| (r.t, r.permission[c] as u8 as f64)).collect()));
    }
    for (name, content) in [
        ("energy.csv", energy),
        ("energy.svg", svg_plot("Energy deviation", "t [s]", &e_series, false)),
        ("switching.csv", sw),
        ("switching.svg", svg_plot("Switching signal and permission", "t [s]", &s_series, true)),
    ] {
        let p = out.join(name);
        write(&p, &content)?;
        files.push(p);
    }
    Ok(files)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal line plot; `steps` draws zero-order-hold traces.
pub fn svg_plot(title: &str, xlabel: &str, series: &[(String, Vec<(f64, f64)>)], steps: bool) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 360.0, 70.0, 140.0, 30.0, 45.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 1e-12 * (1.0 + y0.abs()) {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, (ml + w - mr) / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - ml - mr,
        h - mt - mb
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, px(fx), h - mb + 15.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, ml - 4.0, py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ml + w - mr) / 2.0, h - 8.0, esc(xlabel));
    for (k, (name, p)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        for (i, &(x, y)) in p.iter().enumerate() {
            if i > 0 && steps {
                let _ = write!(d, " {:.2},{:.2}", px(x), py(p[i - 1].1));
            }
            let _ = write!(d, " {:.2},{:.2}", px(x), py(y));
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, d.trim());
        let ly = mt + 14.0 * (k as f64 + 1.0);
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - mr + 10.0, w - mr + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - mr + 35.0, ly + 4.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Applies `PSMPC_THREADS` to the global thread pool.
pub fn configure_threads() {
    if let Some(n) = std::env::var("PSMPC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; PSMPC_THREADS ignored");
        }
    }
}
