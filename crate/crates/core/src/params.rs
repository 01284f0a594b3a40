//! Flat views over learnable parameters.
//!
//! Gradients are stored in a value of the same type as the model they belong
//! to (built with [`Parameters::zeros_like`]), so walking a model and its
//! gradient buffer with the same visitor yields aligned slices.

/// Learning-rate group of a parameter block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Hash-table entries.
    Grid,
    /// Everything else: MLP weights, attention memories, key points, gamma.
    Network,
}

pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, s| out.extend_from_slice(s));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, s| s.fill(value));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// `self += other`, in visitation order.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, s| {
            let n = s.len();
            for (d, v) in s.iter_mut().zip(&flat[offset..offset + n]) {
                *d += v;
            }
            offset += n;
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }

    fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        self.visit(&mut |_, s| {
            for v in s {
                m = m.max(v.abs());
            }
        });
        m
    }
}
