//! Tape LSTM and attention against literal per-element implementations.

mod common;

use common::oracles::{attention_deviation, lstm_sequence_deviation, lstm_step_deviation, TOL};

#[test]
fn lstm_step_matches_literal_equations() {
    let d = lstm_step_deviation(1000);
    assert!(d <= TOL, "max deviation {d:e}");
}

#[test]
fn unrolled_lstm_matches_repeated_literal_steps() {
    let d = lstm_sequence_deviation(300);
    assert!(d <= TOL, "max deviation {d:e}");
}

#[test]
fn attention_matches_literal_equations() {
    let d = attention_deviation(1000);
    assert!(d <= TOL, "max deviation {d:e}");
}
