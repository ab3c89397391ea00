#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// A small but complete config: 2D target, one GHD iteration, tiny nets.
pub fn tiny_config(target: &str, out: &Path, steps: usize) -> String {
    format!(
        r#"
seed = 3
output_dir = "{out}"

[target]
{target}

[model.decoder]
kind = "ghd"
dim = 2
d0 = 2
k = 1
j = 1
eps0 = 0.01
final_eps0 = 1.0
init_step = 0.1
init_final_step = 0.1
init_hidden = [8]
corr_hidden = [4]
final_hidden = [4]
step_hidden = [4]
smooth = false

[model.encoder]
kind = "diffusion"
hidden = [8]

[train]
steps = {steps}
batch_size = 8
checkpoint_every = 5

[eval]
chunk = 16
"#,
        out = out.display()
    )
}

pub const GAUSSIAN: &str = "kind = \"gaussian\"\ndim = 2";
pub const MOG6: &str = "kind = \"mog\"\npreset = \"mog6\"";

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}
