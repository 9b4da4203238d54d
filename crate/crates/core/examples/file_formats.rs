//! Writing and reading the trace and bank containers, and what a reader
//! says about a damaged file.

use trdq::cli::calibrate_from_traces;
use trdq::formats::{bank_from_bytes, read_bank, write_bank, TraceFile};
use trdq::toydit::{capture_traces, PipelineToggles, Sample, ToyDiT, ToyDiTConfig};

fn main() -> trdq::Result<()> {
    let dir = std::env::temp_dir().join(format!("trdq-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let model = ToyDiT::new(ToyDiTConfig {
        steps: 4,
        ..ToyDiTConfig::default()
    })?;
    let cfg = *model.config();

    let capture = capture_traces(&model, &[Sample::from_seed(&cfg, 0)])?;
    let trace = TraceFile::from_capture(&capture)?;
    let trace_path = dir.join("calib.trdq");
    trace.write(&trace_path)?;
    let back = TraceFile::read(&trace_path)?;
    println!(
        "trace: {} records ({} attention), {} bytes, round trip equal: {}",
        back.records.len(),
        back.attention().len(),
        std::fs::metadata(&trace_path)?.len(),
        back == trace
    );

    let bank = calibrate_from_traces(
        &model,
        &back,
        &PipelineToggles::FULL.calibration_settings(&cfg),
    )?;
    let bank_path = dir.join("params.bank");
    write_bank(&bank, &bank_path)?;
    println!(
        "bank: {} entries, {} bytes, round trip equal: {}",
        bank.entries().len(),
        std::fs::metadata(&bank_path)?.len(),
        read_bank(&bank_path)? == bank
    );

    let mut bytes = std::fs::read(&bank_path)?;
    bytes.truncate(bytes.len() - 16);
    println!("truncated bank: {}", bank_from_bytes(&bytes).unwrap_err());
    bytes[0] = b'?';
    println!("damaged magic: {}", bank_from_bytes(&bytes).unwrap_err());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
