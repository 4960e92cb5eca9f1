//! Synthetic two-style corpus.
//!
//! Sentences are drawn from templates whose `{style}` slots take a word from
//! the lexicon of the sentence's style and whose other `{slot}`s take content
//! words shared by both styles. The two lexicons are index-aligned, so each
//! sentence has a natural transfer: the same sentence with every style word
//! replaced by its counterpart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};

pub const DEFAULT_SPEC: &str = "\
seed = 42
train_per_style = 500
dev_per_style = 100
test_per_style = 100
references = false

lexicon.0 = bad terrible awful horrible poor bland rude nasty disappointing mediocre unpleasant dreadful
lexicon.1 = good great excellent wonderful amazing delicious friendly lovely perfect fantastic pleasant superb

slot.food = pizza pasta burger salad soup coffee tea steak sushi bread cake noodles fries tacos
slot.place = restaurant cafe bar bistro diner bakery hotel shop
slot.person = waiter staff owner chef manager server cashier host
slot.time = today yesterday tonight recently again
slot.thing = service menu music decor price atmosphere view seating

template = the {food} was really {style}
template = the {person} at this {place} was {style}
template = i had the {food} {time} and it was {style}
template = this {place} has {style} {food}
template = the {thing} here is {style}
template = we came {time} and the {food} tasted {style}
template = {style} {thing} and {style} {food} at the {place}
template = the {food} and the {food} were {style}
template = my friend said the {person} was very {style}
template = honestly the {thing} at this {place} is {style}
template = i think the {food} from this {place} is always {style}
template = the {person} brought our {food} {time} and it was {style}
";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub train_per_style: usize,
    pub dev_per_style: usize,
    pub test_per_style: usize,
    pub references: bool,
    pub lexicons: [Vec<String>; 2],
    pub slots: BTreeMap<String, Vec<String>>,
    pub templates: Vec<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::parse(DEFAULT_SPEC).expect("built-in spec parses")
    }
}

fn words(v: &str) -> Vec<String> {
    v.split_whitespace().map(str::to_string).collect()
}

impl SynthSpec {
    /// `key = value` lines; `template` may repeat. Validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self {
            seed: 42,
            train_per_style: 500,
            dev_per_style: 100,
            test_per_style: 100,
            references: false,
            lexicons: [Vec::new(), Vec::new()],
            slots: BTreeMap::new(),
            templates: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: "<synth spec>".into(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad number `{v}`")));
            match k {
                "seed" => spec.seed = v.parse().map_err(|_| bad(format!("bad seed `{v}`")))?,
                "train_per_style" => spec.train_per_style = num(v)?,
                "dev_per_style" => spec.dev_per_style = num(v)?,
                "test_per_style" => spec.test_per_style = num(v)?,
                "references" => spec.references = v == "true",
                "lexicon.0" => spec.lexicons[0] = words(v),
                "lexicon.1" => spec.lexicons[1] = words(v),
                "template" => spec.templates.push(v.to_string()),
                _ => match k.strip_prefix("slot.") {
                    Some(name) => {
                        spec.slots.insert(name.to_string(), words(v));
                    }
                    None => return Err(bad(format!("unknown key `{k}`"))),
                },
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lexicons.iter().any(Vec::is_empty) {
            return Err(Error::Config("both style lexicons must be non-empty".into()));
        }
        if self.lexicons[0].len() != self.lexicons[1].len() {
            return Err(Error::Config("style lexicons must have equal length".into()));
        }
        let overlap: Vec<&str> = self.lexicons[0]
            .iter()
            .filter(|w| self.lexicons[1].contains(w))
            .map(String::as_str)
            .collect();
        if !overlap.is_empty() {
            return Err(Error::LexiconOverlap(overlap.join(", ")));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("no templates".into()));
        }
        for t in &self.templates {
            let slots = template_slots(t);
            if !slots.iter().any(|s| s == "style") {
                return Err(Error::Config(format!("template `{t}` has no {{style}} slot")));
            }
            for s in slots.iter().filter(|s| *s != "style") {
                if self.slots.get(s).map_or(true, Vec::is_empty) {
                    return Err(Error::Config(format!("template `{t}` uses undefined slot `{s}`")));
                }
            }
        }
        Ok(())
    }
}

fn template_slots(t: &str) -> Vec<String> {
    t.split_whitespace()
        .filter_map(|w| w.strip_prefix('{').and_then(|w| w.strip_suffix('}')))
        .map(str::to_string)
        .collect()
}

/// A sentence of style `style` and its transfer into the other style.
fn sample(spec: &SynthSpec, style: usize, rng: &mut ChaCha8Rng) -> (String, String) {
    let t = spec.templates.choose(rng).expect("validated");
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for w in t.split_whitespace() {
        match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
            Some("style") => {
                let k = rng.gen_range(0..spec.lexicons[style].len());
                src.push(spec.lexicons[style][k].as_str());
                dst.push(spec.lexicons[1 - style][k].as_str());
            }
            Some(slot) => {
                let f = spec.slots[slot].choose(rng).expect("validated").as_str();
                src.push(f);
                dst.push(f);
            }
            None => {
                src.push(w);
                dst.push(w);
            }
        }
    }
    (src.join(" "), dst.join(" "))
}

/// File name and contents of every corpus file, in a fixed order.
pub fn synth_files(spec: &SynthSpec) -> Result<Vec<(String, String)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut files = Vec::new();
    let counts = [spec.train_per_style, spec.dev_per_style, spec.test_per_style];
    for (split, &n) in crate::corpus::SPLITS.iter().zip(&counts) {
        for style in 0..2 {
            let mut text = String::new();
            let mut refs = String::new();
            for _ in 0..n {
                let (s, r) = sample(spec, style, &mut rng);
                let _ = writeln!(text, "{s}");
                let _ = writeln!(refs, "{r}");
            }
            files.push((format!("{split}.{style}.txt"), text));
            if *split == "test" && spec.references {
                files.push((format!("test.{style}.ref.txt"), refs));
            }
        }
    }
    Ok(files)
}

/// Writes the corpus into `dir` (created if needed) and returns the file names.
pub fn synth_corpus(spec: &SynthSpec, dir: &Path) -> Result<Vec<String>> {
    let files = synth_files(spec)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, text) in &files {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(io_err(&p))?;
    }
    Ok(files.into_iter().map(|(n, _)| n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_has_six_files_and_is_deterministic() {
        let spec = SynthSpec::default();
        let a = synth_files(&spec).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, synth_files(&spec).unwrap());
    }

    #[test]
    fn every_sentence_carries_its_style_and_lengths_are_bounded() {
        let spec = SynthSpec::default();
        for (name, text) in synth_files(&spec).unwrap() {
            let style: usize = name.split('.').nth(1).unwrap().parse().unwrap();
            for line in text.lines() {
                let w: Vec<&str> = line.split_whitespace().collect();
                assert!((5..=12).contains(&w.len()), "{line}");
                assert!(w.iter().any(|x| spec.lexicons[style].iter().any(|l| l == x)), "{line}");
                assert!(!w.iter().any(|x| spec.lexicons[1 - style].iter().any(|l| l == x)));
            }
        }
    }

    #[test]
    fn overlapping_lexicons_are_named() {
        let text = DEFAULT_SPEC.replace("lexicon.1 = good", "lexicon.1 = bad");
        match SynthSpec::parse(&text) {
            Err(Error::LexiconOverlap(w)) => assert_eq!(w, "bad"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn references_swap_only_style_words() {
        let mut spec = SynthSpec::default();
        spec.references = true;
        spec.train_per_style = 5;
        spec.dev_per_style = 5;
        spec.test_per_style = 20;
        let files = synth_files(&spec).unwrap();
        assert_eq!(files.len(), 8);
        let get = |n: &str| files.iter().find(|f| f.0 == n).unwrap().1.clone();
        for (s, r) in get("test.0.txt").lines().zip(get("test.0.ref.txt").lines()) {
            let (s, r): (Vec<&str>, Vec<&str>) = (s.split_whitespace().collect(), r.split_whitespace().collect());
            assert_eq!(s.len(), r.len());
            for (a, b) in s.iter().zip(&r) {
                if a != b {
                    let k = spec.lexicons[0].iter().position(|w| w == a).unwrap();
                    assert_eq!(spec.lexicons[1][k], *b);
                }
            }
        }
    }
}
