//! Regenerates the bundled toy corpora and multiple-choice task.
//!
//! ```text
//! cargo run -p salprune --example make_toy_data -- data
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use salprune::rng::substream;
use serde_json::json;

const SEED: u64 = 20240611;
const CORPUS_BYTES: usize = 120_000;
const MCQ_ITEMS: usize = 200;

const NAMES: &[&str] = &["Adams", "Baker", "Chen", "Diaz", "Evans", "Fischer", "Gupta", "Hughes", "Ito", "Jones"];
const SYMPTOMS: &[&str] = &[
    "fever", "cough", "fatigue", "headache", "nausea", "chest pain", "dizziness", "a rash", "shortness of breath",
    "joint pain", "chills", "back pain",
];
const CONDITIONS: &[&str] = &[
    "pneumonia", "asthma", "diabetes", "hypertension", "influenza", "migraine", "anemia", "bronchitis", "arthritis",
    "sepsis",
];
const DRUGS: &[&str] = &[
    "amoxicillin", "ibuprofen", "metformin", "lisinopril", "albuterol", "prednisone", "insulin", "aspirin",
    "paracetamol", "heparin",
];
const TESTS: &[&str] = &["a blood count", "a chest x-ray", "an ECG", "a urine test", "a CT scan", "a glucose test"];

const INGREDIENTS: &[&str] = &[
    "flour", "butter", "sugar", "eggs", "milk", "cream", "yeast", "honey", "olive oil", "rice", "lentils", "cheese",
];
const VEGETABLES: &[&str] = &["onions", "carrots", "potatoes", "tomatoes", "peppers", "leeks", "mushrooms", "zucchini"];
const SPICES: &[&str] = &["cumin", "paprika", "black pepper", "nutmeg", "cinnamon", "turmeric", "oregano", "chili"];
const DISHES: &[&str] = &["soup", "stew", "bread", "risotto", "curry", "pie", "omelette", "salad", "cake", "sauce"];
const HERBS: &[&str] = &["parsley", "basil", "dill", "mint", "thyme", "coriander"];
const FATS: &[&str] = &["butter", "olive oil", "lard", "ghee"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty list")
}

fn clinical_sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..7) {
        0 => format!(
            "The patient presented with {} and {}. ",
            pick(rng, SYMPTOMS),
            pick(rng, SYMPTOMS)
        ),
        1 => format!(
            "Dr. {} prescribed {} {} mg twice daily for {}. ",
            pick(rng, NAMES),
            pick(rng, DRUGS),
            rng.random_range(1..=20) * 25,
            pick(rng, CONDITIONS)
        ),
        2 => format!(
            "Blood pressure was {}/{} mmHg and the heart rate was {} beats per minute. ",
            rng.random_range(95..=180),
            rng.random_range(55..=110),
            rng.random_range(48..=130)
        ),
        3 => format!(
            "Mr. {} was admitted for {} and discharged after {} days. ",
            pick(rng, NAMES),
            pick(rng, CONDITIONS),
            rng.random_range(2..=14)
        ),
        4 => format!(
            "Symptoms of {} include {}, {} and {}. ",
            pick(rng, CONDITIONS),
            pick(rng, SYMPTOMS),
            pick(rng, SYMPTOMS),
            pick(rng, SYMPTOMS)
        ),
        5 => format!(
            "The nurse ordered {} to rule out {}. ",
            pick(rng, TESTS),
            pick(rng, CONDITIONS)
        ),
        _ => format!(
            "Treatment with {} reduced the {} within {} hours. ",
            pick(rng, DRUGS),
            pick(rng, SYMPTOMS),
            rng.random_range(2..=72)
        ),
    }
}

fn kitchen_sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..7) {
        0 => format!(
            "Whisk the {} with the {} until smooth. ",
            pick(rng, INGREDIENTS),
            pick(rng, INGREDIENTS)
        ),
        1 => format!(
            "Bake at {} degrees for {} minutes, then let it cool. ",
            rng.random_range(6..=12) * 20,
            rng.random_range(10..=60)
        ),
        2 => format!(
            "Chop {} {} and fry them in {} over medium heat. ",
            rng.random_range(2..=6),
            pick(rng, VEGETABLES),
            pick(rng, FATS)
        ),
        3 => format!(
            "Season the {} with {} and a pinch of salt. ",
            pick(rng, DISHES),
            pick(rng, SPICES)
        ),
        4 => format!(
            "Serve the {} warm with fresh {}. ",
            pick(rng, DISHES),
            pick(rng, HERBS)
        ),
        5 => format!(
            "Stir {} grams of {} into the {} and simmer gently. ",
            rng.random_range(1..=10) * 50,
            pick(rng, INGREDIENTS),
            pick(rng, DISHES)
        ),
        _ => format!(
            "For the {} you need {}, {} and {}. ",
            pick(rng, DISHES),
            pick(rng, INGREDIENTS),
            pick(rng, VEGETABLES),
            pick(rng, SPICES)
        ),
    }
}

fn corpus(rng: &mut ChaCha8Rng, sentence: fn(&mut ChaCha8Rng) -> String) -> String {
    let mut out = String::with_capacity(CORPUS_BYTES + 128);
    let mut in_paragraph = 0;
    while out.len() < CORPUS_BYTES {
        out.push_str(&sentence(rng));
        in_paragraph += 1;
        if in_paragraph == 6 {
            out.pop();
            out.push('\n');
            in_paragraph = 0;
        }
    }
    out
}

/// Clinical prompts whose correct continuation stays in the clinical domain;
/// distractors are kitchen continuations of the same shape.
fn mcq(rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for _ in 0..MCQ_ITEMS {
        let (prompt, correct, wrong): (String, String, Vec<String>) = match rng.random_range(0..3) {
            0 => (
                format!("Symptoms of {} include", pick(rng, CONDITIONS)),
                format!(" {} and {}.", pick(rng, SYMPTOMS), pick(rng, SYMPTOMS)),
                (0..3)
                    .map(|_| format!(" {} and {}.", pick(rng, INGREDIENTS), pick(rng, SPICES)))
                    .collect(),
            ),
            1 => (
                format!("Dr. {} prescribed", pick(rng, NAMES)),
                format!(" {} for {}.", pick(rng, DRUGS), pick(rng, CONDITIONS)),
                (0..3)
                    .map(|_| format!(" {} for {}.", pick(rng, INGREDIENTS), pick(rng, DISHES)))
                    .collect(),
            ),
            _ => (
                "The patient presented with".to_string(),
                format!(" {}.", pick(rng, SYMPTOMS)),
                (0..3).map(|_| format!(" {}.", pick(rng, VEGETABLES))).collect(),
            ),
        };
        let answer = rng.random_range(0..4);
        let mut options = wrong;
        options.insert(answer, correct);
        let line = json!({ "prompt": prompt, "options": options, "answer": answer });
        writeln!(out, "{line}").expect("write to string");
    }
    out
}

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(&dir)?;
    let clinical = corpus(&mut substream(SEED, "toy-clinical"), clinical_sentence);
    let kitchen = corpus(&mut substream(SEED, "toy-kitchen"), kitchen_sentence);
    let task = mcq(&mut substream(SEED, "toy-mcq"));
    std::fs::write(dir.join("toy_clinical.txt"), clinical)?;
    std::fs::write(dir.join("toy_kitchen.txt"), kitchen)?;
    std::fs::write(dir.join("toy_mcq.jsonl"), task)?;
    println!("wrote toy data to {}", dir.display());
    Ok(())
}
