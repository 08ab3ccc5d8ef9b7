//! Holds the acceptance runner in `tests/acceptance.rs`.
