//! Single-layer vanilla LSTM with peephole connections.
//!
//! For each timestep `t` (with `h⁻¹ = c⁻¹ = 0` unless given):
//!
//! ```text
//! f = W_f x + U_f h⁻ + V_f ⊙ c⁻ + b_f      f̃ = σ(f)
//! i = W_i x + U_i h⁻ + V_i ⊙ c⁻ + b_i      ĩ = σ(i)
//! z = W_c x + U_c h⁻ + b_c                 z̃ = tanh(z)
//! c = f̃ ⊙ c⁻ + ĩ ⊙ z̃                       c̃ = tanh(c)
//! o = W_o x + U_o h⁻ + V_o ⊙ c + b_o       õ = σ(o)
//! h = õ ⊙ c̃
//! ```
//!
//! The hidden output `h` is the network output, so the hidden width equals
//! the target width.

use std::io::{BufRead, Write};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Number of parameter arrays in one layer.
pub const ARRAY_COUNT: usize = 15;

/// Array names in checkpoint order.
pub const ARRAY_NAMES: [&str; ARRAY_COUNT] = [
    "W_f", "W_i", "W_c", "W_o", "U_f", "U_i", "U_c", "U_o", "V_f", "V_i", "V_o", "b_f", "b_i",
    "b_c", "b_o",
];

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParameters<S> {
    pub w_f: Matrix<S>,
    pub w_i: Matrix<S>,
    pub w_c: Matrix<S>,
    pub w_o: Matrix<S>,
    pub u_f: Matrix<S>,
    pub u_i: Matrix<S>,
    pub u_c: Matrix<S>,
    pub u_o: Matrix<S>,
    pub v_f: Vec<S>,
    pub v_i: Vec<S>,
    pub v_o: Vec<S>,
    pub b_f: Vec<S>,
    pub b_i: Vec<S>,
    pub b_c: Vec<S>,
    pub b_o: Vec<S>,
}

impl<S: Scalar> LstmParameters<S> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        let w = || Matrix::zeros(outputs, inputs);
        let u = || Matrix::zeros(outputs, outputs);
        let v = || vec![S::zero(); outputs];
        LstmParameters {
            w_f: w(),
            w_i: w(),
            w_c: w(),
            w_o: w(),
            u_f: u(),
            u_i: u(),
            u_c: u(),
            u_o: u(),
            v_f: v(),
            v_i: v(),
            v_o: v(),
            b_f: v(),
            b_i: v(),
            b_c: v(),
            b_o: v(),
        }
    }

    /// `N`
    pub fn input_width(&self) -> usize {
        self.w_f.cols()
    }

    /// `M`
    pub fn output_width(&self) -> usize {
        self.w_f.rows()
    }

    /// Shape of each array in checkpoint order; vectors are `(1, M)`.
    pub fn array_shapes(&self) -> [(usize, usize); ARRAY_COUNT] {
        shapes(self.input_width(), self.output_width())
    }

    pub fn arrays(&self) -> [&[S]; ARRAY_COUNT] {
        [
            self.w_f.as_slice(),
            self.w_i.as_slice(),
            self.w_c.as_slice(),
            self.w_o.as_slice(),
            self.u_f.as_slice(),
            self.u_i.as_slice(),
            self.u_c.as_slice(),
            self.u_o.as_slice(),
            &self.v_f,
            &self.v_i,
            &self.v_o,
            &self.b_f,
            &self.b_i,
            &self.b_c,
            &self.b_o,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut [S]; ARRAY_COUNT] {
        [
            self.w_f.as_mut_slice(),
            self.w_i.as_mut_slice(),
            self.w_c.as_mut_slice(),
            self.w_o.as_mut_slice(),
            self.u_f.as_mut_slice(),
            self.u_i.as_mut_slice(),
            self.u_c.as_mut_slice(),
            self.u_o.as_mut_slice(),
            &mut self.v_f,
            &mut self.v_i,
            &mut self.v_o,
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn squared_norm(&self) -> S {
        self.arrays()
            .iter()
            .flat_map(|a| a.iter())
            .map(|&v| v * v)
            .sum()
    }

    /// Builds a parameter set from flat arrays in checkpoint order.
    pub fn from_arrays(inputs: usize, outputs: usize, arrays: Vec<Vec<S>>) -> Result<Self> {
        if arrays.len() != ARRAY_COUNT {
            return Err(Error::Dimension(format!(
                "expected {ARRAY_COUNT} arrays, got {}",
                arrays.len()
            )));
        }
        let mut p = Self::zeros(inputs, outputs);
        for ((dst, src), name) in p.arrays_mut().into_iter().zip(&arrays).zip(ARRAY_NAMES) {
            if dst.len() != src.len() {
                return Err(Error::Dimension(format!(
                    "{name}: expected {} values, got {}",
                    dst.len(),
                    src.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(p)
    }
}

fn shapes(n: usize, m: usize) -> [(usize, usize); ARRAY_COUNT] {
    let w = (m, n);
    let u = (m, m);
    let v = (1, m);
    [w, w, w, w, u, u, u, u, v, v, v, v, v, v, v]
}

/// Draws every weight, peephole and bias i.i.d. from `U[-range, range]`.
/// Draw order follows [`ARRAY_NAMES`], row-major within each array.
pub fn init_parameters<S: Scalar>(
    inputs: usize,
    outputs: usize,
    seed: u64,
    range: f64,
) -> Result<LstmParameters<S>> {
    if inputs == 0 || outputs == 0 {
        return Err(Error::Config(format!(
            "layer needs at least one input and one output, got N={inputs} M={outputs}"
        )));
    }
    if !(range >= 0.0 && range.is_finite()) {
        return Err(Error::Config(format!("init range must be >= 0, got {range}")));
    }
    let mut params = LstmParameters::zeros(inputs, outputs);
    if range == 0.0 {
        return Ok(params);
    }
    let dist = Uniform::new_inclusive(-range, range).expect("finite non-empty range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for array in params.arrays_mut() {
        for v in array.iter_mut() {
            *v = S::lit(dist.sample(&mut rng));
        }
    }
    Ok(params)
}

/// Gate activation `σ_g`.
#[inline]
pub fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

/// Cell-input and hidden-output activation `σ_c = σ_h`.
#[inline]
pub fn tanh_act<S: Scalar>(v: S) -> S {
    v.tanh()
}

/// `σ'(v)` evaluated from the pre-activation.
#[inline]
pub fn sigmoid_prime<S: Scalar>(v: S) -> S {
    let s = sigmoid(v);
    s * (S::one() - s)
}

/// `tanh'(v)` evaluated from the pre-activation.
#[inline]
pub fn tanh_prime<S: Scalar>(v: S) -> S {
    let t = v.tanh();
    S::one() - t * t
}

/// Everything the backward pass needs from one sequence. All matrices are
/// `T × M`, row `t` holding timestep `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache<S> {
    pub f: Matrix<S>,
    pub i: Matrix<S>,
    pub z: Matrix<S>,
    pub c: Matrix<S>,
    pub o: Matrix<S>,
    pub f_act: Matrix<S>,
    pub i_act: Matrix<S>,
    pub z_act: Matrix<S>,
    pub c_act: Matrix<S>,
    pub o_act: Matrix<S>,
    pub h: Matrix<S>,
    pub h_init: Vec<S>,
    pub c_init: Vec<S>,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn steps(&self) -> usize {
        self.h.rows()
    }

    /// Network output `y = h`.
    pub fn outputs(&self) -> &Matrix<S> {
        &self.h
    }

    /// `h^{t-1}`, falling back to the initial state at `t = 0`.
    pub fn h_prev(&self, t: usize) -> &[S] {
        if t == 0 {
            &self.h_init
        } else {
            self.h.row(t - 1)
        }
    }

    /// `c^{t-1}`, falling back to the initial state at `t = 0`.
    pub fn c_prev(&self, t: usize) -> &[S] {
        if t == 0 {
            &self.c_init
        } else {
            self.c.row(t - 1)
        }
    }
}

/// Runs the recurrence from zero initial states.
pub fn forward<S: Scalar>(params: &LstmParameters<S>, inputs: &Matrix<S>) -> Result<ForwardCache<S>> {
    let m = params.output_width();
    let zeros = vec![S::zero(); m];
    forward_from(params, inputs, &zeros, &zeros)
}

pub fn forward_from<S: Scalar>(
    params: &LstmParameters<S>,
    inputs: &Matrix<S>,
    h_init: &[S],
    c_init: &[S],
) -> Result<ForwardCache<S>> {
    let (steps, n) = inputs.shape();
    let m = params.output_width();
    if n != params.input_width() || h_init.len() != m || c_init.len() != m {
        return Err(Error::Dimension(format!(
            "forward: inputs are {steps}x{n}, layer is N={} M={m}, initial states {}/{}",
            params.input_width(),
            h_init.len(),
            c_init.len()
        )));
    }
    let zm = || Matrix::zeros(steps, m);
    let mut cache = ForwardCache {
        f: zm(),
        i: zm(),
        z: zm(),
        c: zm(),
        o: zm(),
        f_act: zm(),
        i_act: zm(),
        z_act: zm(),
        c_act: zm(),
        o_act: zm(),
        h: zm(),
        h_init: h_init.to_vec(),
        c_init: c_init.to_vec(),
    };

    let mut f = vec![S::zero(); m];
    let mut i = vec![S::zero(); m];
    let mut z = vec![S::zero(); m];
    let mut o = vec![S::zero(); m];
    for t in 0..steps {
        let x = inputs.row(t);
        let h_prev = cache.h_prev(t).to_vec();
        let c_prev = cache.c_prev(t).to_vec();

        f.copy_from_slice(&params.b_f);
        i.copy_from_slice(&params.b_i);
        z.copy_from_slice(&params.b_c);
        o.copy_from_slice(&params.b_o);
        params.w_f.gemv_acc(x, &mut f);
        params.w_i.gemv_acc(x, &mut i);
        params.w_c.gemv_acc(x, &mut z);
        params.w_o.gemv_acc(x, &mut o);
        params.u_f.gemv_acc(&h_prev, &mut f);
        params.u_i.gemv_acc(&h_prev, &mut i);
        params.u_c.gemv_acc(&h_prev, &mut z);
        params.u_o.gemv_acc(&h_prev, &mut o);

        for k in 0..m {
            f[k] += params.v_f[k] * c_prev[k];
            i[k] += params.v_i[k] * c_prev[k];
            let f_act = sigmoid(f[k]);
            let i_act = sigmoid(i[k]);
            let z_act = tanh_act(z[k]);
            let c = f_act * c_prev[k] + i_act * z_act;
            o[k] += params.v_o[k] * c;
            let c_act = tanh_act(c);
            let o_act = sigmoid(o[k]);

            cache.f[(t, k)] = f[k];
            cache.i[(t, k)] = i[k];
            cache.z[(t, k)] = z[k];
            cache.c[(t, k)] = c;
            cache.o[(t, k)] = o[k];
            cache.f_act[(t, k)] = f_act;
            cache.i_act[(t, k)] = i_act;
            cache.z_act[(t, k)] = z_act;
            cache.c_act[(t, k)] = c_act;
            cache.o_act[(t, k)] = o_act;
            cache.h[(t, k)] = o_act * c_act;
        }
        if !(cache.h.row(t).iter().all(|v| v.is_finite())
            && cache.c.row(t).iter().all(|v| v.is_finite())
            && o.iter().chain(&f).chain(&i).chain(&z).all(|v| v.is_finite()))
        {
            return Err(Error::NonFiniteForward { timestep: t });
        }
    }
    Ok(cache)
}

const CHECKPOINT_MAGIC: &str = "robust-lstm checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes the text checkpoint:
///
/// ```text
/// robust-lstm checkpoint
/// format_version 1
/// scalar f64
/// inputs <N>
/// outputs <M>
/// <name> <rows> <cols>          (15 blocks in ARRAY_NAMES order)
/// <row values, space separated> (one line per row)
/// ```
///
/// Values use the shortest round-trip exponent notation, so reading the file
/// back reproduces every bit.
pub fn write_checkpoint<S: Scalar>(params: &LstmParameters<S>, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "format_version {CHECKPOINT_VERSION}")?;
    writeln!(out, "scalar {}", std::any::type_name::<S>())?;
    writeln!(out, "inputs {}", params.input_width())?;
    writeln!(out, "outputs {}", params.output_width())?;
    for ((name, (rows, cols)), data) in ARRAY_NAMES
        .iter()
        .zip(params.array_shapes())
        .zip(params.arrays())
    {
        writeln!(out, "{name} {rows} {cols}")?;
        for row in data.chunks(cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(input: impl BufRead) -> Result<LstmParameters<S>> {
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = move || -> Result<(usize, String)> {
        match lines.next() {
            Some((no, Ok(l))) => Ok((no, l)),
            Some((no, Err(e))) => Err(Error::Parse {
                line: no,
                message: e.to_string(),
            }),
            None => Err(Error::Parse {
                line: 0,
                message: "unexpected end of checkpoint".into(),
            }),
        }
    };
    let perr = |line: usize, message: String| Error::Parse { line, message };

    let (no, magic) = next()?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(perr(no, "not a robust-lstm checkpoint".into()));
    }
    let header = |expect: &str, (no, l): (usize, String)| -> Result<String> {
        match l.trim().split_once(' ') {
            Some((k, v)) if k == expect => Ok(v.trim().to_string()),
            _ => Err(perr(no, format!("expected `{expect} <value>`"))),
        }
    };
    let version = header("format_version", next()?)?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(perr(2, format!("unsupported checkpoint version {version}")));
    }
    let scalar = header("scalar", next()?)?;
    if scalar != std::any::type_name::<S>() {
        return Err(perr(
            3,
            format!("checkpoint stores {scalar}, reader expects {}", std::any::type_name::<S>()),
        ));
    }
    let (no, l) = next()?;
    let n: usize = header("inputs", (no, l))?
        .parse()
        .map_err(|_| perr(no, "bad input width".into()))?;
    let (no, l) = next()?;
    let m: usize = header("outputs", (no, l))?
        .parse()
        .map_err(|_| perr(no, "bad output width".into()))?;

    let mut arrays = Vec::with_capacity(ARRAY_COUNT);
    for (name, (rows, cols)) in ARRAY_NAMES.iter().zip(shapes(n, m)) {
        let (no, l) = next()?;
        let expect = format!("{name} {rows} {cols}");
        if l.trim() != expect {
            return Err(perr(no, format!("expected array header `{expect}`")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (no, l) = next()?;
            let row: Vec<S> = l
                .split_whitespace()
                .map(|tok| tok.parse::<S>().map_err(|_| perr(no, format!("bad number `{tok}`"))))
                .collect::<Result<_>>()?;
            if row.len() != cols {
                return Err(perr(no, format!("{name}: expected {cols} values, got {}", row.len())));
            }
            data.extend(row);
        }
        arrays.push(data);
    }
    let params = LstmParameters::from_arrays(n, m, arrays)?;
    if !params.is_finite() {
        return Err(Error::Data("checkpoint contains non-finite parameters".into()));
    }
    Ok(params)
}
