use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicIsize, Ordering};

use s2st_core::config::Preset;
use s2st_core::corpus::generate;
use s2st_core::training::Trainer;

struct Counting;

static LIVE: AtomicIsize = AtomicIsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        LIVE.fetch_add(layout.size() as isize, Ordering::Relaxed);
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        LIVE.fetch_sub(layout.size() as isize, Ordering::Relaxed);
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        LIVE.fetch_add(new_size as isize - layout.size() as isize, Ordering::Relaxed);
        System.realloc(ptr, layout, new_size)
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

#[test]
fn batch_one_training_holds_live_bytes_flat() {
    let preset = Preset::named("toy").unwrap().with_overrides([("train.batch_size", "1")]).unwrap();
    let pool = generate(&preset.corpus, &preset.input_mel, &preset.output_mel, 9, 0, 16).unwrap();
    let mut trainer = Trainer::new(&preset).unwrap();
    for _ in 0..10 {
        trainer.train_step(&pool).unwrap();
    }
    let baseline = LIVE.load(Ordering::Relaxed);
    let mut peak_growth = 0;
    for _ in 0..1000 {
        trainer.train_step(&pool).unwrap();
        peak_growth = peak_growth.max(LIVE.load(Ordering::Relaxed) - baseline);
    }
    let growth = LIVE.load(Ordering::Relaxed) - baseline;
    assert!(growth <= 0, "live bytes grew by {growth} over 1000 steps");
    assert!(peak_growth < 1 << 20, "live bytes between steps rose by {peak_growth}");
}
