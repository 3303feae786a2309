use crate::error::{param_err, Error, Result};
use crate::tensor::{Float, ParamStore};

/// Exponential moving average of the learnable parameters. Batch-norm running
/// statistics are left alone.
#[derive(Debug, Clone)]
pub struct Ema<T: Float = f32> {
    pub decay: f64,
    shadow: Vec<Vec<T>>,
    updates: u64,
}

impl<T: Float> Ema<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(param_err!("ema decay must be in (0, 1), got {decay}"));
        }
        let shadow = store.ids().map(|id| store.get(id).data().to_vec()).collect();
        Ok(Self {
            decay,
            shadow,
            updates: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn shadow(&self) -> &[Vec<T>] {
        &self.shadow
    }

    fn check(&self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.shadow.len() {
            return Err(Error::State(format!(
                "ema tracks {} parameters but the store has {}",
                self.shadow.len(),
                store.len()
            )));
        }
        for (id, s) in store.ids().zip(&self.shadow) {
            if store.get(id).numel() != s.len() {
                return Err(Error::State(format!(
                    "ema shadow for '{}' has {} values, parameter has {}",
                    store.name(id),
                    s.len(),
                    store.get(id).numel()
                )));
            }
        }
        Ok(())
    }

    /// `shadow = d·shadow + (1 − d)·param`.
    pub fn update(&mut self, store: &ParamStore<T>) -> Result<()> {
        self.check(store)?;
        let d = T::lit(self.decay);
        let one_minus = T::lit(1.0 - self.decay);
        for (id, s) in store.ids().zip(&mut self.shadow) {
            for (sv, &pv) in s.iter_mut().zip(store.get(id).data()) {
                *sv = d * *sv + one_minus * pv;
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Exchanges shadow and live values. Calling it twice restores both.
    pub fn swap(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.check(store)?;
        let ids: Vec<_> = store.ids().collect();
        for (id, s) in ids.into_iter().zip(&mut self.shadow) {
            store.get_mut(id).data_mut().swap_with_slice(s);
        }
        Ok(())
    }

    /// Writes the shadow values into `store` without touching `self`.
    pub fn copy_to(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.check(store)?;
        let ids: Vec<_> = store.ids().collect();
        for (id, s) in ids.into_iter().zip(&self.shadow) {
            store.get_mut(id).data_mut().copy_from_slice(s);
        }
        Ok(())
    }
}
