//! Closed-form parameter and multiply-accumulate counts per convolution.
//!
//! A convolution producing an `H'×W'` map costs `H'·W'·k²·(C_in/groups)·C_out`
//! MACs. Padded taps count, so the cost does not depend on dilation.

use serde::Serialize;

use crate::model::{ModelConfig, ModelError, OUTPUT_STRIDE};
use crate::tensor::conv_output_dim;

/// `H'·W'·k²·C_in·C_out`.
pub fn regular_conv_macs(out_h: u64, out_w: u64, k: u64, cin: u64, cout: u64) -> u64 {
    out_h * out_w * k * k * cin * cout
}

/// Depthwise `H'·W'·C_in·k²` plus pointwise `H'·W'·C_in·C_out`.
pub fn separable_conv_macs(out_h: u64, out_w: u64, k: u64, cin: u64, cout: u64) -> u64 {
    out_h * out_w * cin * k * k + out_h * out_w * cin * cout
}

/// Separable-to-regular cost ratio `1/C_out + 1/k²`.
pub fn separable_ratio(k: u64, cout: u64) -> f64 {
    1.0 / cout as f64 + 1.0 / (k * k) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpRow {
    pub name: String,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub stride: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub params: u64,
    pub macs: u64,
}

/// A depthwise+pointwise pair against the regular convolution it replaces.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparableRow {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub separable_macs: u64,
    pub regular_macs: u64,
    pub ratio: f64,
    pub closed_form_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCountReport {
    pub input_h: usize,
    pub input_w: usize,
    pub rows: Vec<OpRow>,
    pub separable: Vec<SeparableRow>,
    /// Convolution weights and biases only.
    pub total_params: u64,
    pub total_macs: u64,
}

impl OpCountReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!("input {}x{} (HxW)\n", self.input_h, self.input_w);
        out.push_str(&format!(
            "{:<28} {:>3} {:>5} {:>5} {:>5} {:>2} {:>3} {:>9} {:>9} {:>14}\n",
            "layer", "k", "cin", "cout", "grp", "s", "dil", "out", "params", "MACs"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>3} {:>5} {:>5} {:>5} {:>2} {:>3} {:>9} {:>9} {:>14}\n",
                r.name,
                r.kernel,
                r.cin,
                r.cout,
                r.groups,
                r.stride,
                r.dilation,
                format!("{}x{}", r.out_h, r.out_w),
                r.params,
                r.macs
            ));
        }
        out.push_str(&format!("{:<28} {:>55} {:>14}\n", "total", self.total_params, self.total_macs));
        out.push_str("\nseparable vs regular\n");
        out.push_str(&format!(
            "{:<20} {:>5} {:>5} {:>14} {:>14} {:>8} {:>8}\n",
            "layer", "cin", "cout", "separable", "regular", "ratio", "1/Co+1/k2"
        ));
        for s in &self.separable {
            out.push_str(&format!(
                "{:<20} {:>5} {:>5} {:>14} {:>14} {:>8.4} {:>8.4}\n",
                s.name, s.cin, s.cout, s.separable_macs, s.regular_macs, s.ratio, s.closed_form_ratio
            ));
        }
        out
    }
}

struct Counter {
    rows: Vec<OpRow>,
    separable: Vec<SeparableRow>,
}

impl Counter {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        (h, w): (usize, usize),
        k: usize,
        cin: usize,
        cout: usize,
        groups: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> (usize, usize) {
        let pad = if k == 1 { 0 } else { dilation };
        let oh = conv_output_dim(h, k, stride, pad, dilation).expect("validated dims");
        let ow = conv_output_dim(w, k, stride, pad, dilation).expect("validated dims");
        let cin_g = (cin / groups) as u64;
        let params = (cout as u64) * cin_g * (k * k) as u64 + if bias { cout as u64 } else { 0 };
        let macs = (oh * ow) as u64 * (k * k) as u64 * cin_g * cout as u64;
        self.rows.push(OpRow {
            name,
            kernel: k,
            cin,
            cout,
            groups,
            stride,
            dilation,
            out_h: oh,
            out_w: ow,
            params,
            macs,
        });
        (oh, ow)
    }

    fn sep(&mut self, name: &str, hw: (usize, usize), cin: usize, cout: usize, stride: usize) -> (usize, usize) {
        let (oh, ow) = self.conv(format!("{name}.depthwise"), hw, 3, cin, cin, cin, stride, 1, false);
        self.conv(format!("{name}.pointwise"), (oh, ow), 1, cin, cout, 1, 1, 1, false);
        let (h64, w64) = (oh as u64, ow as u64);
        let separable_macs = separable_conv_macs(h64, w64, 3, cin as u64, cout as u64);
        let regular_macs = regular_conv_macs(h64, w64, 3, cin as u64, cout as u64);
        self.separable.push(SeparableRow {
            name: name.to_string(),
            cin,
            cout,
            kernel: 3,
            out_h: oh,
            out_w: ow,
            separable_macs,
            regular_macs,
            ratio: separable_macs as f64 / regular_macs as f64,
            closed_form_ratio: separable_ratio(3, cout as u64),
        });
        (oh, ow)
    }

    fn block(&mut self, name: &str, hw: (usize, usize), cin: usize, cout: usize, stride: usize) -> (usize, usize) {
        let a = self.sep(&format!("{name}.sep1"), hw, cin, cout, 1);
        let out = self.sep(&format!("{name}.sep2"), a, cout, cout, stride);
        if stride != 1 || cin != cout {
            self.conv(format!("{name}.skip.conv"), hw, 1, cin, cout, 1, stride, 1, false);
        }
        out
    }
}

/// Per-convolution counts for one `input_h × input_w` image, in forward order.
pub fn count_ops(config: &ModelConfig, input_h: usize, input_w: usize) -> Result<OpCountReport, ModelError> {
    config.validate()?;
    for (dim, value) in [("height", input_h), ("width", input_w)] {
        if value == 0 || value % OUTPUT_STRIDE != 0 {
            return Err(ModelError::Dimension { dim, value });
        }
    }
    let mut c = Counter {
        rows: Vec::new(),
        separable: Vec::new(),
    };
    let s = config.stem_channels;
    let mut hw = c.conv("stem.conv".into(), (input_h, input_w), 3, 3, s, 1, 2, 1, false);
    let mut cin = s;
    for (i, cout) in config.encoder_widths().into_iter().enumerate() {
        hw = c.block(&format!("block{}", i + 1), hw, cin, cout, 2);
        cin = cout;
    }
    for i in 0..config.middle_blocks {
        hw = c.block(&format!("middle{}", i + 1), hw, cin, cin, 1);
    }
    let a = config.aspp_channels;
    c.conv("aspp.branch_1x1".into(), hw, 1, cin, a, 1, 1, 1, false);
    for r in config.aspp_rates {
        c.conv(format!("aspp.branch_r{r}"), hw, 3, cin, a, 1, 1, r, false);
    }
    c.conv("aspp.pool".into(), (1, 1), 1, cin, a, 1, 1, 1, false);
    c.conv("aspp.fuse".into(), hw, 1, 5 * a, a, 1, 1, 1, false);
    c.conv("classifier".into(), hw, 1, a, config.num_classes, 1, 1, 1, true);

    let total_params = c.rows.iter().map(|r| r.params).sum();
    let total_macs = c.rows.iter().map(|r| r.macs).sum();
    Ok(OpCountReport {
        input_h,
        input_w,
        rows: c.rows,
        separable: c.separable,
        total_params,
        total_macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let reg = regular_conv_macs(32, 32, 3, 64, 128);
        let sep = separable_conv_macs(32, 32, 3, 64, 128);
        assert_eq!(reg, 75_497_472);
        assert_eq!(sep, 589_824 + 8_388_608);
        assert!((sep as f64 / reg as f64 - separable_ratio(3, 128)).abs() < 1e-12);
        assert_eq!(regular_conv_macs(1, 1, 1, 1, 1), 1);
    }

    #[test]
    fn aspp_rates_cost_the_same() {
        let r = count_ops(&ModelConfig::default(), 144, 192).unwrap();
        let macs: Vec<u64> = r
            .rows
            .iter()
            .filter(|row| row.name.starts_with("aspp.branch_r"))
            .map(|row| row.macs)
            .collect();
        assert_eq!(macs.len(), 3);
        assert!(macs.iter().all(|&m| m == macs[0]));
        assert!(count_ops(&ModelConfig::default(), 100, 192).is_err());
    }

    #[test]
    fn conv_params_match_model_count() {
        let cfg = ModelConfig::default();
        let r = count_ops(&cfg, 144, 192).unwrap();
        let bn: u64 = cfg.parameter_count() as u64 - r.total_params;
        // Every batch norm adds gamma and beta for its output channels.
        let expected_bn: u64 = r
            .rows
            .iter()
            .filter(|row| !row.name.ends_with("depthwise") && row.name != "classifier")
            .map(|row| 2 * row.cout as u64)
            .sum();
        assert_eq!(bn, expected_bn);
        assert!(r.to_table().contains("aspp.branch_r18"));
    }
}
