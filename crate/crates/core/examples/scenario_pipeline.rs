//! Runs the batch pipeline on the bundled scenarios into a temporary
//! directory and lists what it wrote.

use std::fs;
use std::path::Path;

use mfgc::cli::{run_audits, run_scenario, RunOptions};

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let out = std::env::temp_dir().join("mfgc-scenario-pipeline");
    for name in ["interval-congestion", "disk-target-chase"] {
        let text = fs::read_to_string(root.join(format!("{name}.toml"))).expect("scenario");
        let dir = out.join(name);
        fs::create_dir_all(&dir).expect("output dir");
        let text: String = text
            .lines()
            .map(|l| if l.starts_with("output_dir") { "output_dir = \".\"".to_string() } else { l.to_string() })
            .collect::<Vec<_>>()
            .join("\n");
        let config = dir.join("scenario.toml");
        fs::write(&config, text).expect("write scenario");

        match run_scenario(&config, &RunOptions::default()) {
            Ok(s) => println!("{name}: converged {}, exploitability {:.3e}, certified {}", s.converged, s.exploitability, s.certified),
            Err(e) => println!("{name}: run failed with exit code {}: {e}", e.exit_code()),
        }
        match run_audits(&config, &RunOptions::default()) {
            Ok(s) => {
                for (suite, rows) in &s.suites {
                    println!("  audit {suite}: {} checks", rows.len());
                }
            }
            Err(e) => println!("  audit failed with exit code {}: {e}", e.exit_code()),
        }
        let mut files: Vec<String> = fs::read_dir(&dir)
            .expect("list")
            .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
            .collect();
        files.sort();
        println!("  {}: {}", dir.display(), files.join(" "));
    }
}
