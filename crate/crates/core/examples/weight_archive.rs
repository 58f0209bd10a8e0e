//! Saves model weights to the binary archive, reloads them and compares
//! digests per parameter group.

use skattn::archive::{load_weights_with, save_weights_with};
use skattn::config::ModelConfig;
use skattn::unet::{Model, ADAPTER_PREFIX, BASE_PREFIX, MOTION_PREFIX};
use skattn::Result;
use std::collections::BTreeMap;

fn main() -> Result<()> {
    let model = Model::new(&ModelConfig::default())?;
    let store = model.init_all(7);
    let path = std::env::temp_dir().join("skattn-example.skaw");
    let meta = BTreeMap::from([("note".to_string(), "example".to_string())]);
    save_weights_with(&store, &meta, &path)?;
    let (back, meta_back) = load_weights_with(&path)?;
    println!("{} tensors, {} bytes, metadata {meta_back:?}", back.len(), std::fs::metadata(&path)?.len());
    for prefix in [BASE_PREFIX, ADAPTER_PREFIX, MOTION_PREFIX] {
        println!(
            "{prefix:<9} {:>8} values  digest {}  match {}",
            back.numel_with_prefix(prefix),
            &back.digest(prefix)[..16],
            back.digest(prefix) == store.digest(prefix)
        );
    }
    Ok(())
}
