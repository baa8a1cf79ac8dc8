#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use rand::Rng;

pub fn cpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpt"))
        .arg("--log-level")
        .arg("warn")
        .args(args)
        .output()
        .expect("spawn cpt")
}

/// Runs `cpt` and returns stdout, panicking with stderr on failure.
pub fn ok(args: &[&str]) -> String {
    let out = cpt(args);
    assert!(
        out.status.success(),
        "cpt {:?} failed ({:?}):\n{}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn write_lines(path: &Path, lines: &[String]) {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

const LETTERS: &[char] = &[
    'ب', 'ت', 'ث', 'ج', 'ح', 'خ', 'د', 'ذ', 'ر', 'ز', 'س', 'ش', 'ص', 'ض', 'ط', 'ظ', 'ع', 'غ', 'ف', 'ق',
    'ك', 'ل', 'م', 'ن', 'ه', 'و', 'ي', 'ا',
];

/// A pronounceable-looking Arabic-script word, distinct for each `i`.
pub fn word(i: usize) -> String {
    let mut s = String::new();
    let mut n = i + LETTERS.len();
    while n > 0 {
        s.push(LETTERS[n % LETTERS.len()]);
        n /= LETTERS.len();
    }
    s
}

pub fn sentence<R: Rng>(rng: &mut R, lexicon: &[String], min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| lexicon[rng.gen_range(0..lexicon.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}
