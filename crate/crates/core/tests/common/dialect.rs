//! Two synthetic Verilog dialects: clocked modules (`always @(posedge clk)`)
//! and combinational ones (`assign`). Both start with the same neutral
//! head `module mNN(` so the dialect is decided during generation.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use veriguide_core::ControlCode;

const SIGNALS: &[&str] = &["a", "b", "c", "d", "x", "en", "in0", "in1", "sel", "data"];
const OPS: &[&str] = &["&", "|", "^", "+"];

pub fn head(index: usize) -> String {
    format!("module m{:02}(", index % 100)
}

/// One module of the given dialect.
pub fn sample(rng: &mut impl Rng, label: ControlCode) -> String {
    let name = head(rng.random_range(0..100));
    let picked: Vec<&&str> = SIGNALS.choose_multiple(rng, 2).collect();
    let (a, b) = (picked[0], picked[1]);
    let op = OPS.choose(rng).unwrap();
    match label {
        ControlCode::Pos => format!(
            "{name}input clk, input {a}, input {b}, output reg y);\n  always @(posedge clk) y <= {a} {op} {b};\nendmodule\n"
        ),
        ControlCode::Neg => format!("{name}input clk, input {a}, input {b}, output y);\n  assign y = {a} {op} {b};\nendmodule\n"),
    }
}

/// `per_class` examples of each dialect, interleaved.
pub fn corpus(per_class: usize, seed: u64) -> Vec<(String, ControlCode)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        out.push((sample(&mut rng, ControlCode::Pos), ControlCode::Pos));
        out.push((sample(&mut rng, ControlCode::Neg), ControlCode::Neg));
    }
    out
}
