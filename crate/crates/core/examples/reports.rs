//! Config files, CSV reports and SVG charts: run the simulate and train
//! commands into a temporary directory and redraw a chart from its CSV.

use tgo_lab::commands::{
    cmd_simulate, cmd_train, load_threshold, CommandOptions, EPOCHS_FILE, THRESHOLD_FILE,
};
use tgo_lab::report::{line_chart_svg, RunManifest};
use tgo_lab::textfmt::FlatFile;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("tgo-lab-reports-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let config = dir.join("experiment.txt");
    std::fs::write(
        &config,
        "seed = 4\nenv.k = 3\nenv.m = 5\ntrain.epochs = 10\ndata.n = 128\n",
    )?;

    let opts = CommandOptions::new(Some(config), dir.join("run"));
    cmd_simulate(&opts)?;
    let tau = load_threshold(&opts.out_dir.join(THRESHOLD_FILE))?;
    println!(
        "simulate: threshold {:.4} from {} scores",
        tau.value, tau.sample_count
    );
    cmd_train(&opts)?;

    let manifest =
        RunManifest::from_flat(&FlatFile::load(&opts.out_dir.join(RunManifest::FILE_NAME))?)?;
    println!(
        "manifest: {} seed {} env {}",
        manifest.command,
        manifest.seed,
        &manifest.env_fingerprint[..16]
    );
    let mut files: Vec<String> = std::fs::read_dir(&opts.out_dir)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    files.sort();
    println!("outputs: {}", files.join(" "));

    let csv = std::fs::read(opts.out_dir.join(EPOCHS_FILE))?;
    let svg = line_chart_svg(&csv, "epoch", "mean_reward", "exact mean reward")?;
    let on_disk = std::fs::read_to_string(opts.out_dir.join("mean_reward.svg"))?;
    println!(
        "chart redrawn from CSV matches the written chart: {}",
        svg == on_disk
    );
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
