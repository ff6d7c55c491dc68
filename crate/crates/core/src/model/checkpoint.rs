//! Checkpoint directory: `params.capt` (concatenated `CAPT` tensors in
//! parameter order), `config.json`, and `vocab.txt`.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::model::{Model, ModelConfig, ModelParams, Vocab};
use crate::numerics::Tensor;

pub fn save_checkpoint(dir: &Path, model: &Model) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("params.capt"))?);
    for t in model.params.tensors() {
        t.write_to(&mut w)?;
    }
    w.flush()?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&model.config)?,
    )?;
    fs::write(dir.join("vocab.txt"), model.vocab.to_text())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let config: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let vocab = Vocab::from_text(&fs::read_to_string(dir.join("vocab.txt"))?)?;
    let mut r = BufReader::new(fs::File::open(dir.join("params.capt"))?);
    let mut tensors = Vec::with_capacity(13);
    for _ in 0..13 {
        tensors.push(Tensor::read_from(&mut r)?);
    }
    let params = ModelParams::from_tensors(tensors)?;
    Model::new(config, params, vocab)
}
