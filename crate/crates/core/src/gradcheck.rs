//! Central-difference verification of reverse-mode gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// max over checked elements of |a − n| / max(1e-8, |a| + |n|)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose ±eps probes crossed a relu/max kink.
    pub excluded: usize,
    /// (parameter index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at the worst element.
    pub worst_values: Option<(f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
        self.checked += other.checked;
        self.excluded += other.excluded;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Gradient-check settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Check at most this many evenly spaced elements of each parameter.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_per_param: None,
        }
    }
}

/// Checks `f` at `params` with default settings and the given `eps`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(f, params)
}

impl GradCheck {
    pub fn run<F>(&self, f: F, params: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        if !(self.eps > 0.0 && self.eps <= 1e-2) {
            return Err(Error::invalid(format!(
                "eps {} outside (0, 1e-2]",
                self.eps
            )));
        }
        let eval = |ps: &[Tensor]| -> Result<(f64, u64)> {
            let tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
            let out = f(&tape, &vars)?;
            if out.value().len() != 1 {
                return Err(Error::invalid("grad_check needs a scalar-valued function"));
            }
            Ok((out.item(), tape.kink_signature()))
        };

        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&tape, &vars)?;
        let base_sig = tape.kink_signature();
        let base_val = root.item();
        let grads = tape.backward(&root)?;
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect();

        let (again, again_sig) = eval(params)?;
        if again.to_bits() != base_val.to_bits() || again_sig != base_sig {
            return Err(Error::Graph(
                "function under check is not deterministic".into(),
            ));
        }

        let mut report = GradCheckReport::default();
        let mut probe: Vec<Tensor> = params.to_vec();
        for (pi, p) in params.iter().enumerate() {
            let n = p.len();
            let step = match self.max_per_param {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            for ei in (0..n).step_by(step) {
                let orig = p.data()[ei];
                probe[pi].data_mut()[ei] = orig + self.eps;
                let (fp, sp) = eval(&probe)?;
                probe[pi].data_mut()[ei] = orig - self.eps;
                let (fm, sm) = eval(&probe)?;
                probe[pi].data_mut()[ei] = orig;
                if sp != base_sig || sm != base_sig {
                    report.excluded += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * self.eps);
                let err = relative_error(analytic[pi].data()[ei], numeric);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some((pi, ei));
                    report.worst_values = Some((analytic[pi].data()[ei], numeric));
                }
            }
        }
        Ok(report)
    }

    /// Checks `f` with respect to `inputs` and every trainable tensor of
    /// `store`; `f` receives the bound parameters and the input vars.
    pub fn run_with_params<F>(
        &self,
        store: &ParamStore,
        inputs: &[Tensor],
        f: F,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&Tape, &Bound, &[Var]) -> Result<Var>,
    {
        let keys: Vec<String> = store.trainable_keys().map(String::from).collect();
        let mut params = inputs.to_vec();
        for k in &keys {
            params.push(store.get(k)?.clone());
        }
        let n_in = inputs.len();
        self.run(
            |tape, vars| {
                let bound = Bound::from_vars(
                    store,
                    keys.iter().cloned().zip(vars[n_in..].iter().cloned()),
                );
                f(tape, &bound, &vars[..n_in])
            },
            &params,
        )
    }
}
