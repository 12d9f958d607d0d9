//! CLI wiring; see `dispatch`.
