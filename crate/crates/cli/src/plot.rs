use std::path::Path;

use hypode::simulator::SimTrace;
use plotters::prelude::*;

/// Log-scale plot of ‖ε_ξ‖, ‖ξ‖ and sup|x| over time.
pub fn norms(path: &Path, trace: &SimTrace) -> Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let t_end = trace.t.last().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
    let series = [
        ("|eps_xi|", &trace.eps_xi_norm, RED),
        ("|xi|", &trace.xi_norm, BLUE),
        ("sup |x|", &trace.x_sup, BLACK),
    ];
    let floor = 1e-8_f64;
    let top = series
        .iter()
        .flat_map(|s| s.1.iter())
        .fold(floor * 10.0, |m, &v| m.max(v))
        * 2.0;
    let mut chart = ChartBuilder::on(&root)
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..t_end, (floor..top).log_scale())?;
    chart.configure_mesh().x_desc("t").draw()?;
    for (name, values, color) in series {
        chart
            .draw_series(LineSeries::new(
                trace.t.iter().zip(values.iter()).map(|(&t, &v)| (t, v.max(floor))),
                color,
            ))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw()?;
    root.present()?;
    Ok(())
}
