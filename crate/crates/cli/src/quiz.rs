//! Human multiple-choice quiz: sampled questions with seeded candidate
//! order, answers from a terminal or a script.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use vgsi_core::sampler::{MCQuestion, NUM_CHOICES};
use vgsi_core::seed;

pub const DEFAULT_QUESTIONS: usize = 100;

/// One question as shown: `order[d]` is the candidate index displayed at
/// position `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizItem {
    pub step_id: String,
    pub prompt: String,
    pub images: Vec<String>,
    pub order: [usize; NUM_CHOICES],
    /// Displayed position of the gold image.
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizAnswer {
    pub step_id: String,
    pub answer: usize,
    pub correct: bool,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizSession {
    pub seed: u64,
    pub items: Vec<QuizItem>,
    pub answers: Vec<QuizAnswer>,
    pub accuracy: Option<f64>,
}

/// Draws `n` questions (all if fewer) and fixes each one's displayed
/// candidate order. A pure function of the inputs.
pub fn prepare(questions: &[MCQuestion], n: usize, seed: u64) -> Vec<QuizItem> {
    let picks = index::sample(&mut seed::rng_for(seed, "quiz"), questions.len(), n.min(questions.len()));
    picks
        .into_iter()
        .map(|i| {
            let q = &questions[i];
            let mut order = [0, 1, 2, 3];
            order.shuffle(&mut seed::rng_for(seed, &format!("quiz/{}", q.step_id)));
            let images: Vec<String> = order.iter().map(|&c| q.candidates()[c].to_string()).collect();
            let gold = order.iter().position(|&c| c == q.gold_position).expect("permutation");
            QuizItem { step_id: q.step_id.clone(), prompt: q.prompt_text.clone(), images, order, gold }
        })
        .collect()
}

fn parse_answer(line: &str) -> Option<usize> {
    let t = line.trim();
    if let Ok(n) = t.parse::<usize>() {
        return (n < NUM_CHOICES).then_some(n);
    }
    match t.to_ascii_lowercase().as_str() {
        "a" => Some(0),
        "b" => Some(1),
        "c" => Some(2),
        "d" => Some(3),
        _ => None,
    }
}

/// Presents each item on `out` and reads answers from `input` until the
/// items or the input run out. Unparseable answers are reported and the
/// question is asked again.
pub fn run_session(items: Vec<QuizItem>, seed: u64, image_root: Option<&str>, input: &mut dyn BufRead, out: &mut dyn Write) -> std::io::Result<QuizSession> {
    let mut answers = Vec::new();
    'items: for (n, item) in items.iter().enumerate() {
        writeln!(out, "[{}/{}] {}", n + 1, items.len(), item.prompt)?;
        for (d, img) in item.images.iter().enumerate() {
            match image_root {
                Some(root) => writeln!(out, "  {d}) {root}/{img}")?,
                None => writeln!(out, "  {d}) {img}")?,
            }
        }
        let start = Instant::now();
        loop {
            write!(out, "answer (0-3): ")?;
            out.flush()?;
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                writeln!(out)?;
                break 'items;
            }
            match parse_answer(&line) {
                Some(answer) => {
                    answers.push(QuizAnswer {
                        step_id: item.step_id.clone(),
                        answer,
                        correct: answer == item.gold,
                        elapsed_ms: start.elapsed().as_millis() as u64,
                    });
                    break;
                }
                None => writeln!(out, "invalid answer {:?}; enter 0, 1, 2 or 3", line.trim())?,
            }
        }
    }
    let accuracy = (!answers.is_empty()).then(|| answers.iter().filter(|a| a.correct).count() as f64 / answers.len() as f64);
    Ok(QuizSession { seed, items, answers, accuracy })
}

/// Mean accuracy over sessions that recorded at least one answer.
pub fn average_accuracy(sessions: &[QuizSession]) -> Option<f64> {
    let accs: Vec<f64> = sessions.iter().filter_map(|s| s.accuracy).collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}
