//! Per-task storage accounting: amortized basis-mask cost plus the α payload,
//! and the efficiency factor relative to storing one full mask per task.

use serde::Serialize;

use crate::error::{Error, Result};

/// Inputs to one accounting row. `max_tasks` may be `f64::INFINITY` for
/// task families too large to enumerate (e.g. all pixel permutations).
#[derive(Debug, Clone, Copy)]
pub struct AccountingInputs {
    pub num_params: u64,
    pub d: u32,
    pub basis_size: u32,
    pub alpha_rows: u32,
    pub max_tasks: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AccountingRow {
    pub mask_kb: f64,
    pub alpha_count: u64,
    pub phi_kb: f64,
    pub efficiency: f64,
    pub efficiency_rounded: i64,
}

/// kB means 1024 bytes. Masks cost 2 bits per parameter; α entries are
/// 32-bit floats. Φ amortizes the basis over all possible tasks.
pub fn storage_accounting(inputs: AccountingInputs) -> Result<AccountingRow> {
    if inputs.max_tasks <= 0.0 {
        return Err(Error::Config("max_tasks must be positive".into()));
    }
    if inputs.num_params == 0 || inputs.d == 0 || inputs.basis_size == 0 || inputs.alpha_rows == 0 {
        return Err(Error::Config("accounting inputs must be positive".into()));
    }
    let mask_kb = inputs.num_params as f64 * 2.0 / 8.0 / 1024.0;
    let alpha_count = inputs.alpha_rows as u64 * inputs.d as u64;
    let phi_kb =
        inputs.basis_size as f64 * mask_kb / inputs.max_tasks + alpha_count as f64 * 4.0 / 1024.0;
    let efficiency = mask_kb / phi_kb;
    Ok(AccountingRow {
        mask_kb,
        alpha_count,
        phi_kb,
        efficiency,
        efficiency_rounded: efficiency.round() as i64,
    })
}

/// Parses a task count that may be written as a factorial, e.g. `784!`.
/// Factorials overflowing f64 saturate to infinity.
pub fn parse_max_tasks(text: &str) -> Result<f64> {
    let text = text.trim();
    if let Some(base) = text.strip_suffix('!') {
        let n: u64 = base
            .parse()
            .map_err(|_| Error::Config(format!("bad factorial base {base:?}")))?;
        let mut acc = 1.0f64;
        for k in 2..=n {
            acc *= k as f64;
            if acc.is_infinite() {
                break;
            }
        }
        Ok(acc)
    } else {
        text.parse::<f64>()
            .map_err(|_| Error::Config(format!("bad task count {text:?}")))
    }
}

/// Built-in rows for common architectures. Layer counts for the
/// convolutional models are derived, not measured here.
pub fn builtin_presets() -> Vec<(&'static str, AccountingInputs)> {
    vec![
        (
            "permuted-mnist/lenet-300-100",
            AccountingInputs {
                num_params: 266_200,
                d: 3,
                basis_size: 100,
                alpha_rows: 100,
                max_tasks: f64::INFINITY, // 784!
            },
        ),
        (
            "rotated-mnist/lenet-300-100",
            AccountingInputs {
                num_params: 266_200,
                d: 3,
                basis_size: 5,
                alpha_rows: 5,
                max_tasks: 359.0,
            },
        ),
        (
            "split-cifar-100/resnet-18",
            AccountingInputs {
                num_params: 6_200_000,
                d: 21,
                basis_size: 10,
                alpha_rows: 10,
                max_tasks: 20.0,
            },
        ),
        (
            "split-cifar-100/wide-resnet-18",
            AccountingInputs {
                num_params: 11_700_000,
                d: 21,
                basis_size: 10,
                alpha_rows: 10,
                max_tasks: 20.0,
            },
        ),
        (
            "split-cifar-100/wide-resnet-34",
            AccountingInputs {
                num_params: 21_800_000,
                d: 37,
                basis_size: 10,
                alpha_rows: 10,
                max_tasks: 20.0,
            },
        ),
        (
            "imagenet/vgg-16",
            AccountingInputs {
                num_params: 137_900_000,
                d: 16,
                basis_size: 75,
                alpha_rows: 75,
                max_tasks: 2100.0,
            },
        ),
        (
            "imagenet/resnet-50",
            AccountingInputs {
                num_params: 25_600_000,
                d: 53,
                basis_size: 75,
                alpha_rows: 75,
                max_tasks: 2100.0,
            },
        ),
        (
            "imagenet/resnet-101",
            AccountingInputs {
                num_params: 44_500_000,
                d: 104,
                basis_size: 75,
                alpha_rows: 75,
                max_tasks: 2100.0,
            },
        ),
        (
            "imagenet/resnet-152",
            AccountingInputs {
                num_params: 60_200_000,
                d: 155,
                basis_size: 75,
                alpha_rows: 75,
                max_tasks: 2100.0,
            },
        ),
    ]
}
