//! Per-thread call counters for the code paths that must stay idle at
//! inference time (prompt encoding, prototype losses).

use std::cell::Cell;

thread_local! {
    static VISION_IMAGES: Cell<u64> = const { Cell::new(0) };
    static PROMPT_ENCODES: Cell<u64> = const { Cell::new(0) };
    static PROTOTYPE_CALLS: Cell<u64> = const { Cell::new(0) };
    static CLASSIFIER_CALLS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub vision_images: u64,
    pub prompt_encodes: u64,
    pub prototype_calls: u64,
    pub classifier_calls: u64,
}

impl Counters {
    pub fn snapshot() -> Self {
        Self {
            vision_images: VISION_IMAGES.with(Cell::get),
            prompt_encodes: PROMPT_ENCODES.with(Cell::get),
            prototype_calls: PROTOTYPE_CALLS.with(Cell::get),
            classifier_calls: CLASSIFIER_CALLS.with(Cell::get),
        }
    }

    pub fn since(self, earlier: Counters) -> Counters {
        Counters {
            vision_images: self.vision_images - earlier.vision_images,
            prompt_encodes: self.prompt_encodes - earlier.prompt_encodes,
            prototype_calls: self.prototype_calls - earlier.prototype_calls,
            classifier_calls: self.classifier_calls - earlier.classifier_calls,
        }
    }
}

fn bump(cell: &'static std::thread::LocalKey<Cell<u64>>, by: u64) {
    cell.with(|c| c.set(c.get() + by));
}

pub(crate) fn record_vision_encode(images: usize) {
    bump(&VISION_IMAGES, images as u64);
}

pub(crate) fn record_prompt_encode() {
    bump(&PROMPT_ENCODES, 1);
}

pub(crate) fn record_prototype_call() {
    bump(&PROTOTYPE_CALLS, 1);
}

pub(crate) fn record_classifier_call() {
    bump(&CLASSIFIER_CALLS, 1);
}
