//! Serves a synthetic model over the stdio frame protocol.
//!
//! Usage: `confex-synth-server <spec.json>`

use std::io::{self, BufReader, BufWriter};
use std::process::ExitCode;

use confex::predictor::protocol::serve;
use confex::predictor::{SyntheticModel, SyntheticSpec};

fn main() -> ExitCode {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: confex-synth-server <spec.json>");
        return ExitCode::from(1);
    };
    let model = match std::fs::read_to_string(&path)
        .map_err(|e| e.to_string())
        .and_then(|text| serde_json::from_str::<SyntheticSpec>(&text).map_err(|e| e.to_string()))
        .and_then(|spec| SyntheticModel::compile(spec).map_err(|e| e.to_string()))
    {
        Ok(m) => m,
        Err(e) => {
            eprintln!("confex-synth-server: {path}: {e}");
            return ExitCode::from(1);
        }
    };
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    match serve(&model, BufReader::new(stdin), BufWriter::new(stdout)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("confex-synth-server: {e}");
            ExitCode::from(2)
        }
    }
}
