//! Validation suite for probdetect. The exit criteria live in the `acceptance`
//! test target (`tests/acceptance.rs`).
