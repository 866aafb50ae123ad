//! `crossres report`: figures and a summary table for a finished run.
//!
//! ```text
//! <out>/loss_curves.png    one panel per loss column of losses.csv
//! <out>/cmc.png            CMC curves of the settings in eval.csv
//! <out>/recovery_grid.png  rows alternate input and recovered image per identity,
//!                          one column per requested rate
//! <out>/summary.txt        table with one row per eval.csv row, then the legend
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use crossres::checkpoint::load_checkpoint;
use crossres::datapipe::{load_split_dir, synthesize_lr, ImageRecord};
use crossres::evaluator::{evaluate_setting, extract_embeddings, psnr, Setting};
use crossres::kv::KvWriter;
use crossres::run::RunLayout;
use crossres::trainer::Trainer;
use crossres::Error;
use image::{Rgb, RgbImage};

use crate::manifest::RunManifest;
use crate::plot::{colour, line_plot, panel_grid, Bounds, Series};
use crate::{prepare_output_dir, usage};

const CMC_MAX_RANK: usize = 20;
const GRID_SCALE: u32 = 2;
const GRID_GAP: u32 = 2;
const LOSS_PANEL: (u32, u32) = (240, 160);
const LOSS_COLUMNS_PER_ROW: u32 = 4;
const CMC_SIZE: (u32, u32) = (480, 320);

pub struct ReportArgs {
    pub run_dir: PathBuf,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub rates: Vec<u32>,
    pub samples: usize,
    pub force: bool,
    pub seed: Option<u64>,
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<Csv> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(Csv { header, rows })
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let layout = RunLayout::new(&a.run_dir);
    for p in [layout.losses(), layout.eval(), layout.final_checkpoint()] {
        if !p.exists() {
            return Err(usage(format!("{} is missing; is {} a finished run?", p.display(), a.run_dir.display())));
        }
    }
    if a.rates.is_empty() || a.rates.contains(&0) {
        return Err(usage("--rates needs positive rates"));
    }
    if same_dir(&a.out, &a.run_dir) {
        return Err(usage("--out must differ from --run-dir"));
    }
    let losses = read_csv(&layout.losses())?;
    let evals = read_csv(&layout.eval())?;
    let settings = evals
        .rows
        .iter()
        .map(|row| row.first().map_or("", String::as_str).parse::<Setting>())
        .collect::<Result<Vec<_>, _>>()?;
    let data_dir = match &a.data {
        Some(d) => d.clone(),
        None => RunManifest::read(&a.run_dir)?
            .input("data")
            .map(PathBuf::from)
            .ok_or_else(|| usage("the run manifest records no dataset; pass --data"))?,
    };
    let trainer: Trainer<f32> = load_checkpoint(&layout.final_checkpoint(), None)?;
    let (data_cfg, split) = load_split_dir(&data_dir, None)?;
    let net_cfg = trainer.net.config();
    if (net_cfg.height, net_cfg.width) != (data_cfg.height, data_cfg.width) {
        return Err(Error::ManifestMismatch(format!(
            "run expects {}x{} images, dataset has {}x{}",
            net_cfg.height, net_cfg.width, data_cfg.height, data_cfg.width
        ))
        .into());
    }

    prepare_output_dir(&a.out, a.force)?;
    let mut w = KvWriter::new();
    w.section("report").list("rates", &a.rates).kv("samples", a.samples);
    let inputs = vec![
        ("run_dir".to_string(), crate::absolute(&a.run_dir).display().to_string()),
        ("data".to_string(), crate::absolute(&data_dir).display().to_string()),
    ];
    RunManifest::new("report", a.seed.unwrap_or(trainer.cfg.seed), w.finish(), inputs).write_new(&a.out)?;

    let mut legend = String::new();

    // losses
    let loss_cols: Vec<usize> = (1..losses.header.len()).collect();
    let panels: Vec<Vec<Series>> = loss_cols
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let points = losses
                .rows
                .iter()
                .filter_map(|row| Some((row.first()?.parse().ok()?, row.get(c)?.parse().ok()?)))
                .collect();
            vec![Series {
                points,
                colour: colour(i).1,
            }]
        })
        .collect();
    save(&panel_grid(LOSS_PANEL.0, LOSS_PANEL.1, LOSS_COLUMNS_PER_ROW, &panels), &a.out.join("loss_curves.png"))?;
    writeln!(legend, "loss_curves.png panels, row-major, {LOSS_COLUMNS_PER_ROW} per row:")?;
    for (i, (&c, panel)) in loss_cols.iter().zip(&panels).enumerate() {
        let b = Bounds::of(panel);
        writeln!(
            legend,
            "  {:<8} {:<6} iter {:.0}..{:.0}  value {:.4}..{:.4}",
            losses.header[c],
            colour(i).0,
            b.x.0,
            b.x.1,
            b.y.0,
            b.y.1
        )?;
    }

    // CMC curves
    let mut curves = Vec::with_capacity(settings.len());
    writeln!(legend, "\ncmc.png: match rate (0..1) against rank:")?;
    let mut max_rank = 1;
    for (i, &s) in settings.iter().enumerate() {
        let r = evaluate_setting(&trainer.net, &trainer.params, &split, s)?;
        let k = r.cmc.cmc.len().min(CMC_MAX_RANK);
        max_rank = max_rank.max(k);
        curves.push(Series {
            points: (1..=k).map(|j| (j as f64, r.cmc.rank(j))).collect(),
            colour: colour(i).1,
        });
        writeln!(legend, "  {:<10} {:<6} rank 1..{k}", s.to_string(), colour(i).0)?;
    }
    let bounds = Bounds {
        x: (1.0, (max_rank as f64).max(2.0)),
        y: (0.0, 1.0),
    };
    save(&line_plot(CMC_SIZE.0, CMC_SIZE.1, &curves, bounds), &a.out.join("cmc.png"))?;

    // recovery grid
    let sources = sample_identities(&split.query_hr, a.samples);
    let mut inputs = Vec::with_capacity(sources.len() * a.rates.len());
    for hr in &sources {
        for &r in &a.rates {
            inputs.push(if r == 1 { (*hr).clone() } else { synthesize_lr(hr, r)? });
        }
    }
    let (_, recovered) = extract_embeddings(&trainer.net, &trainer.params, &inputs)?;
    let (h, w) = (data_cfg.height as u32, data_cfg.width as u32);
    let (cw, ch) = (w * GRID_SCALE, h * GRID_SCALE);
    let cols = a.rates.len() as u32;
    let rows = 2 * sources.len() as u32;
    let mut grid = RgbImage::from_pixel(
        cols * (cw + GRID_GAP) + GRID_GAP,
        rows.max(1) * (ch + GRID_GAP) + GRID_GAP,
        Rgb([255, 255, 255]),
    );
    let mut psnr_by_rate = vec![(0.0, 0.0); a.rates.len()];
    for (i, hr) in sources.iter().enumerate() {
        for c in 0..a.rates.len() {
            let n = i * a.rates.len() + c;
            let (x, y) = (GRID_GAP + c as u32 * (cw + GRID_GAP), GRID_GAP + 2 * i as u32 * (ch + GRID_GAP));
            blit(&mut grid, &inputs[n].pixels, h, w, x, y);
            blit(&mut grid, &recovered[n], h, w, x, y + ch + GRID_GAP);
            psnr_by_rate[c].0 += psnr(&inputs[n].pixels, &hr.pixels)?;
            psnr_by_rate[c].1 += psnr(&recovered[n], &hr.pixels)?;
        }
    }
    save(&grid, &a.out.join("recovery_grid.png"))?;
    let ids: Vec<String> = sources.iter().map(|r| r.identity.to_string()).collect();
    writeln!(
        legend,
        "\nrecovery_grid.png: {cols} columns at rates {:?}; row pairs (input above recovered) for identities {}",
        a.rates,
        ids.join(", ")
    )?;
    if !sources.is_empty() {
        writeln!(legend, "  rate  input_psnr  recovered_psnr")?;
        for (&r, (p_in, p_out)) in a.rates.iter().zip(&psnr_by_rate) {
            let n = sources.len() as f64;
            writeln!(legend, "  {r:>4}  {:>10.2}  {:>14.2}", p_in / n, p_out / n)?;
        }
    }

    let mut text = summary_table(&evals);
    text.push('\n');
    text.push_str(&legend);
    let path = a.out.join("summary.txt");
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", summary_table(&evals));
    Ok(())
}

/// Header plus one row per evaluation, columns from `eval.csv`.
fn summary_table(evals: &Csv) -> String {
    let cols = ["setting", "rank1", "rank5", "rank10", "mAP", "mean_psnr", "mean_ssim"];
    let idx: Vec<Option<usize>> = cols.iter().map(|c| evals.header.iter().position(|h| h == c)).collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>7} {:>7} {:>7} {:>7} {:>9} {:>9}",
        cols[0], cols[1], cols[2], cols[3], cols[4], "psnr_db", "ssim"
    );
    for row in &evals.rows {
        let f = |i: usize| idx[i].and_then(|j| row.get(j)).map_or("nan", String::as_str);
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>7} {:>7} {:>7} {:>9} {:>9}",
            f(0),
            f(1),
            f(2),
            f(3),
            f(4),
            f(5),
            f(6)
        );
    }
    out
}

/// First HR query source of each of the first `n` identities.
fn sample_identities(sources: &[ImageRecord], n: usize) -> Vec<&ImageRecord> {
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for r in sources {
        if out.len() == n {
            break;
        }
        if !seen.contains(&r.identity) {
            seen.push(r.identity);
            out.push(r);
        }
    }
    out
}

/// Copy an HWC image in `[0, 1]` into `img`, scaled up by `GRID_SCALE`.
fn blit(img: &mut RgbImage, pixels: &[f32], h: u32, w: u32, x0: u32, y0: u32) {
    for y in 0..h * GRID_SCALE {
        for x in 0..w * GRID_SCALE {
            let base = (((y / GRID_SCALE) * w + x / GRID_SCALE) * 3) as usize;
            let px = |c: usize| (pixels[base + c].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x0 + x, y0 + y, Rgb([px(0), px(1), px(2)]));
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
