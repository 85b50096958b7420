use std::io::Write;
use std::path::Path;

use maskmamba_core::backbone::param_count;
use maskmamba_core::{Float, Precision};

use crate::checkpoint::{peek_precision, Checkpoint};
use crate::error::Result;

pub fn run(path: &Path, out: &mut dyn Write) -> Result<()> {
    match peek_precision(path)? {
        Precision::F32 => typed::<f32>(path, out),
        Precision::F64 => typed::<f64>(path, out),
    }
}

fn typed<T: Float>(path: &Path, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::<T>::load(path)?;
    let m = &ck.config.model;
    let kinds: Vec<&str> = m.layer_kinds().iter().map(|k| k.name()).collect();
    let _ = writeln!(out, "checkpoint   {}", path.display());
    let _ = writeln!(out, "precision    {:?}", T::PRECISION);
    let _ = writeln!(out, "step         {}", ck.step);
    let _ = writeln!(out, "parameters   {}", param_count(m)?);
    let _ = writeln!(out, "scheme       {} ({} layers, hidden {})", m.scheme, m.n_layers, m.hidden);
    let _ = writeln!(out, "layers       {}", kinds.join(" "));
    let _ = writeln!(
        out,
        "sections     params{}{}",
        if ck.optimizer.is_some() { " optimizer" } else { "" },
        if ck.ema.is_some() { " ema" } else { "" }
    );
    let _ = writeln!(out, "\n{}", ck.config.to_toml());
    Ok(())
}
