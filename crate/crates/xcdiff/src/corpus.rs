// SPDX-License-Identifier: MIT OR Apache-2.0

//! The bundled tri-domain corpus: a seeded generator for code-like,
//! scientific-like and story-like text, the on-disk layout (UTF-8 files plus
//! `manifest.json`), and the train/eval token split.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xcdiff_core::lm::{Tokenizer, Windows};
use xcdiff_core::rng::{self, DetRng};

use crate::binio::{read_json, write_file, write_json};
use crate::error::{CliError, CliResult};
use crate::shards::sha256_hex;

pub const DOMAINS: [&str; 3] = ["code", "scientific", "story"];
pub const DEFAULT_BYTES_PER_DOMAIN: usize = 400_000;
/// Fraction of each file (cut at a document boundary) used for training.
pub const TRAIN_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub file: String,
    pub domain: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub files: Vec<CorpusFile>,
}

fn pick<'a>(r: &mut DetRng, xs: &[&'a str]) -> &'a str {
    xs[rng::index(r, xs.len())]
}

fn chance(r: &mut DetRng, num: usize, den: usize) -> bool {
    rng::index(r, den) < num
}

const IDENTS: &[&str] = &[
    "count", "total", "index", "value", "items", "buffer", "result", "node", "left", "right", "key", "name",
    "offset", "size", "limit", "queue", "stack", "cache", "score", "weight", "path", "line", "token", "state",
];
const TYPES: &[&str] = &["int", "float", "str", "list", "dict", "bool"];
const FUNCS: &[&str] = &[
    "parse", "merge", "update", "compute", "filter", "render", "load", "store", "split", "search", "insert",
    "remove", "normalize", "encode", "decode", "reduce", "build", "check",
];
const SUFFIXES: &[&str] = &["items", "values", "tree", "config", "lines", "tokens", "scores", "graph", "table"];

fn ident(r: &mut DetRng) -> String {
    if chance(r, 1, 3) {
        format!("{}_{}", pick(r, IDENTS), pick(r, IDENTS))
    } else {
        pick(r, IDENTS).to_string()
    }
}

fn expr(r: &mut DetRng, vars: &[String]) -> String {
    let v = &vars[rng::index(r, vars.len())];
    match rng::index(r, 6) {
        0 => format!("{v} + {}", rng::index(r, 10)),
        1 => format!("len({v})"),
        2 => format!("{v} * 2"),
        3 => format!("{v}[{}]", rng::index(r, 4)),
        4 => format!("{}({v})", pick(r, FUNCS)),
        _ => format!("{v} - 1"),
    }
}

fn code_doc(r: &mut DetRng) -> String {
    let mut s = String::new();
    let fname = format!("{}_{}", pick(r, FUNCS), pick(r, SUFFIXES));
    let n_args = 1 + rng::index(r, 3);
    let mut args: Vec<String> = Vec::new();
    while args.len() < n_args {
        let a = ident(r);
        if !args.contains(&a) {
            args.push(a);
        }
    }
    let sig: Vec<String> = args.iter().map(|a| format!("{a}: {}", pick(r, TYPES))).collect();
    s.push_str(&format!("def {fname}({}):\n", sig.join(", ")));
    s.push_str(&format!("    \"\"\"{} the {} and return the {}.\"\"\"\n", cap(pick(r, FUNCS)), pick(r, SUFFIXES), pick(r, IDENTS)));
    let mut vars = args.clone();
    let out = ident(r);
    s.push_str(&format!("    {out} = {}\n", if chance(r, 1, 2) { "0" } else { "[]" }));
    vars.push(out.clone());
    for _ in 0..2 + rng::index(r, 4) {
        match rng::index(r, 4) {
            0 => {
                let it = pick(r, &["i", "j", "k", "item", "x"]);
                s.push_str(&format!("    for {it} in range({}):\n", expr(r, &vars)));
                s.push_str(&format!("        {out} += {it}\n"));
            }
            1 => {
                let v = &vars[rng::index(r, vars.len())].clone();
                s.push_str(&format!("    if {v} > {}:\n", rng::index(r, 100)));
                s.push_str(&format!("        {out} = {}\n", expr(r, &vars)));
                if chance(r, 1, 2) {
                    s.push_str("    else:\n");
                    s.push_str(&format!("        {out} = {}\n", expr(r, &vars)));
                }
            }
            2 => {
                let t = ident(r);
                s.push_str(&format!("    {t} = {}\n", expr(r, &vars)));
                vars.push(t);
            }
            _ => {
                s.push_str(&format!("    while {out} < {}:\n", rng::index(r, 50) + 1));
                s.push_str(&format!("        {out} = {out} + {}\n", rng::index(r, 5) + 1));
            }
        }
    }
    s.push_str(&format!("    return {out}\n"));
    if chance(r, 1, 3) {
        s.push_str(&format!(
            "\n\nassert {fname}({}) is not None\n",
            args.iter().map(|_| rng::index(r, 10).to_string()).collect::<Vec<_>>().join(", ")
        ));
    }
    s
}

const QUANTITIES: &[&str] = &[
    "temperature", "pressure", "density", "viscosity", "conductivity", "absorbance", "concentration", "yield",
    "velocity", "frequency", "amplitude", "growth rate", "binding affinity", "energy", "entropy",
];
const SUBJECTS: &[&str] = &[
    "the sample", "the catalyst", "the protein", "the alloy", "the solution", "the membrane", "the crystal",
    "the cell culture", "the polymer", "the substrate",
];
const METHODS: &[&str] = &[
    "spectroscopy", "calorimetry", "chromatography", "microscopy", "titration", "diffraction", "simulation",
];
const VERBS_SCI: &[&str] = &["increased", "decreased", "remained stable", "doubled", "fluctuated", "saturated"];
const UNITS: &[&str] = &["K", "kPa", "mg/L", "nm", "Hz", "mV", "mol/L", "J/g"];
const CONNECT: &[&str] = &["However,", "Moreover,", "In contrast,", "Consequently,", "Notably,", "Furthermore,"];

fn number(r: &mut DetRng) -> String {
    format!("{}.{}", 1 + rng::index(r, 500), rng::index(r, 100))
}

fn sci_sentence(r: &mut DetRng) -> String {
    match rng::index(r, 5) {
        0 => format!(
            "We measured the {} of {} using {}.",
            pick(r, QUANTITIES),
            pick(r, SUBJECTS),
            pick(r, METHODS)
        ),
        1 => format!(
            "The {} {} from {} to {} {} as the {} was raised.",
            pick(r, QUANTITIES),
            pick(r, VERBS_SCI),
            number(r),
            number(r),
            pick(r, UNITS),
            pick(r, QUANTITIES)
        ),
        2 => format!(
            "{} the {} of {} {} (p < 0.0{}).",
            pick(r, CONNECT),
            pick(r, QUANTITIES),
            pick(r, SUBJECTS),
            pick(r, VERBS_SCI),
            1 + rng::index(r, 5)
        ),
        3 => format!(
            "These results suggest that {} depends on {} rather than {}.",
            pick(r, QUANTITIES),
            pick(r, QUANTITIES),
            pick(r, QUANTITIES)
        ),
        _ => format!(
            "A mean value of {} ± {} {} was obtained across {} trials.",
            number(r),
            number(r),
            pick(r, UNITS),
            2 + rng::index(r, 20)
        ),
    }
}

fn science_doc(r: &mut DetRng) -> String {
    let mut s = format!(
        "Abstract. We study the {} of {} under varying {}.",
        pick(r, QUANTITIES),
        pick(r, SUBJECTS),
        pick(r, QUANTITIES)
    );
    for _ in 0..3 + rng::index(r, 5) {
        s.push(' ');
        s.push_str(&sci_sentence(r));
    }
    s.push('\n');
    s
}

const NAMES: &[&str] = &["Mia", "Tom", "Lily", "Ben", "Sara", "Max", "Anna", "Leo", "Ruby", "Sam"];
const ANIMALS: &[&str] = &["cat", "dog", "bird", "rabbit", "fox", "frog", "bear", "duck"];
const PLACES: &[&str] = &["park", "forest", "garden", "beach", "river", "hill", "school", "market"];
const OBJECTS: &[&str] = &["ball", "kite", "box", "hat", "book", "cake", "toy", "map", "shell", "flower"];
const FEELINGS: &[&str] = &["happy", "sad", "scared", "excited", "tired", "proud", "curious"];
const COLORS: &[&str] = &["red", "blue", "green", "yellow", "little", "big", "shiny", "old"];

fn cap(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn story_doc(r: &mut DetRng) -> String {
    let hero = pick(r, NAMES);
    let friend = pick(r, ANIMALS);
    let place = pick(r, PLACES);
    let obj = pick(r, OBJECTS);
    let color = pick(r, COLORS);
    let mut s = format!(
        "Once upon a time, there was a girl named {hero}. {hero} had a {color} {obj}. One day, {hero} went to the {place} with a {friend}."
    );
    if ["Tom", "Ben", "Max", "Leo", "Sam"].contains(&hero) {
        s = s.replace("a girl", "a boy");
    }
    for _ in 0..2 + rng::index(r, 4) {
        let line = match rng::index(r, 5) {
            0 => format!(" The {friend} was {}.", pick(r, FEELINGS)),
            1 => format!(
                " \"Look at the {} {}!\" said {hero}.",
                pick(r, COLORS),
                pick(r, OBJECTS)
            ),
            2 => format!(" They played near the {} until the sun went down.", pick(r, PLACES)),
            3 => format!(" Then the {obj} fell and {hero} felt {}.", pick(r, FEELINGS)),
            _ => format!(" The {friend} helped {hero} find a {}.", pick(r, OBJECTS)),
        };
        s.push_str(&line);
    }
    s.push_str(&format!(
        " In the end, {hero} and the {friend} were {}. The end.\n",
        pick(r, FEELINGS)
    ));
    s
}

/// Generates one domain's text: whole documents separated by a blank line,
/// stopping at the first document that reaches `target_bytes`.
pub fn generate_domain(domain: &str, seed: u64, target_bytes: usize) -> CliResult<String> {
    let idx = DOMAINS
        .iter()
        .position(|&d| d == domain)
        .ok_or_else(|| CliError::Config(format!("unknown corpus domain {domain:?}")))?;
    let mut r = rng::stream(seed, 100 + idx as u64);
    let mut out = String::new();
    while out.len() < target_bytes {
        let doc = match idx {
            0 => code_doc(&mut r),
            1 => science_doc(&mut r),
            _ => story_doc(&mut r),
        };
        out.push_str(&doc);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `<domain>.txt` for every domain plus `manifest.json`.
pub fn write_corpus(dir: &Path, seed: u64, bytes_per_domain: usize) -> CliResult<CorpusManifest> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for d in DOMAINS {
        let text = generate_domain(d, seed, bytes_per_domain)?;
        let file = format!("{d}.txt");
        write_file(&dir.join(&file), text.as_bytes())?;
        files.push(CorpusFile {
            file,
            domain: d.into(),
            bytes: text.len(),
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let m = CorpusManifest { seed, files };
    write_json(&dir.join("manifest.json"), &m)?;
    Ok(m)
}

/// Tokenized corpus, one stream per file and split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub train: Vec<Vec<u32>>,
    pub eval: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn train_windows(&self, seq_len: usize) -> Windows {
        Windows::from_streams(&self.train, seq_len)
    }

    pub fn eval_windows(&self, seq_len: usize) -> Windows {
        Windows::from_streams(&self.eval, seq_len)
    }

    pub fn train_tokens(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn eval_tokens(&self) -> usize {
        self.eval.iter().map(Vec::len).sum()
    }
}

/// Byte offset where the eval part of a file starts: the first document
/// boundary at or after `TRAIN_FRACTION` of its length.
pub fn split_point(text: &[u8]) -> usize {
    let target = (text.len() as f64 * TRAIN_FRACTION) as usize;
    text[target..]
        .windows(2)
        .position(|w| w == b"\n\n")
        .map_or(target, |p| target + p + 2)
}

/// Reads and tokenizes the corpus, verifying file digests.
pub fn load_corpus(dir: &Path) -> CliResult<Corpus> {
    let manifest: CorpusManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.files.is_empty() {
        return Err(CliError::Config(format!("{} lists no corpus files", dir.display())));
    }
    let tok = Tokenizer;
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for f in &manifest.files {
        let path = dir.join(&f.file);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(CliError::format(&path, "contents do not match the manifest digest"));
        }
        if std::str::from_utf8(&bytes).is_err() {
            return Err(CliError::format(&path, "corpus files must be UTF-8"));
        }
        let cut = split_point(&bytes);
        train.push(tok.encode(&bytes[..cut]));
        eval.push(tok.encode(&bytes[cut..]));
    }
    Ok(Corpus { manifest, train, eval })
}
