//! Deliberate defects for mutation-testing the gradient checker.

use std::cell::Cell;

thread_local! {
    static SOFTMAX_SIGN_FLIP: Cell<bool> = const { Cell::new(false) };
}

/// Flips the sign of the softmax backward pass on the current thread.
#[doc(hidden)]
pub fn set_softmax_backward_sign_flip(on: bool) {
    SOFTMAX_SIGN_FLIP.with(|c| c.set(on));
}

pub(crate) fn softmax_sign_flip() -> bool {
    SOFTMAX_SIGN_FLIP.with(Cell::get)
}
