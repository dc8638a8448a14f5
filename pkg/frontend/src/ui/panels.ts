// Declarative panel configs. The console builds its DOM from these; the
// three default panels cover lifetime, optics, and orbit feedback. Every
// number a widget displays is a channel value (readouts may show the
// delta against a nominal stated here, which is labeling, not physics).

export interface ReadoutWidget {
  kind: "readout";
  label: string;
  channel: string;
  units?: string;
  nominal?: number; // show (value - nominal) next to the raw value
  digits?: number;
}

export interface SetterWidget {
  kind: "setter";
  label: string;
  channel: string;
  min: number;
  max: number;
  step: number;
  staged?: boolean; // staged setters write on the panel's Apply, not per edit
}

export interface ToggleWidget {
  kind: "toggle";
  label: string;
  channel: string;
}

export interface SelectWidget {
  kind: "select";
  label: string;
  channel: string; // text channel
  options: string[];
}

export interface VectorWidget {
  kind: "vector";
  label: string;
  channel: string;
  length: number; // initial hint; the monitored value's length is authoritative
}

export interface StripChartWidget {
  kind: "stripchart";
  label: string;
  channels: string[];
  window: number; // [s]
  step?: boolean; // draw as staircase (quantized channels)
  units?: string;
}

export type Widget = ReadoutWidget | SetterWidget | ToggleWidget
  | SelectWidget | VectorWidget | StripChartWidget;

export interface PanelConfig {
  title: string;
  widgets: Widget[];
}

export const LIFETIME_PANEL: PanelConfig = {
  title: "Lifetime",
  widgets: [
    { kind: "readout", label: "two-point", channel: "LIFETIME:TWOPOINT", units: "h", digits: 3 },
    { kind: "readout", label: "log fit", channel: "LIFETIME:LOGFIT", units: "h", digits: 3 },
    { kind: "readout", label: "exp fit", channel: "LIFETIME:EXPFIT", units: "h", digits: 3 },
    { kind: "readout", label: "median filt", channel: "LIFETIME:MEDFILT", units: "h", digits: 3 },
    { kind: "readout", label: "window", channel: "LIFETIME:WINDOW-N", digits: 0 },
    { kind: "toggle", label: "engines enabled", channel: "LIFETIME:ENABLE" },
    { kind: "stripchart", label: "beam current", channels: ["ARIDI-BEAM:CURRENT"], window: 300, units: "mA" },
  ],
};

export const OPTICS_PANEL: PanelConfig = {
  title: "Optics",
  widgets: [
    { kind: "readout", label: "setup", channel: "OPTICS:NAME" },
    { kind: "setter", label: "d nu x", channel: "OPTICS:D-NU-X", min: -0.2, max: 0.2, step: 0.001, staged: true },
    { kind: "setter", label: "d nu y", channel: "OPTICS:D-NU-Y", min: -0.2, max: 0.2, step: 0.001, staged: true },
    { kind: "setter", label: "d xi x", channel: "OPTICS:D-XI-X", min: -3, max: 3, step: 0.05, staged: true },
    { kind: "setter", label: "d xi y", channel: "OPTICS:D-XI-Y", min: -3, max: 3, step: 0.05, staged: true },
    { kind: "setter", label: "sext scale", channel: "OPTICS:S-SEXT", min: 0.5, max: 1.5, step: 0.005, staged: true },
    { kind: "setter", label: "energy scale", channel: "OPTICS:S-ENERGY", min: 0.99, max: 1.01, step: 0.0001, staged: true },
    { kind: "readout", label: "tune x", channel: "RING:TUNE-X", nominal: 20.38, digits: 4 },
    { kind: "readout", label: "tune y", channel: "RING:TUNE-Y", nominal: 8.16, digits: 4 },
    { kind: "readout", label: "chrom x", channel: "RING:CHROM-X", nominal: 6.0, digits: 3 },
    { kind: "readout", label: "chrom y", channel: "RING:CHROM-Y", nominal: 4.0, digits: 3 },
  ],
};

export const OFB_PANEL: PanelConfig = {
  title: "Orbit feedback",
  widgets: [
    { kind: "select", label: "mode", channel: "OFB:MODE", options: ["STOPPED", "PASSIVE", "ACTIVE"] },
    { kind: "setter", label: "gain", channel: "OFB:GAIN", min: 0, max: 1, step: 0.05 },
    { kind: "setter", label: "period", channel: "OFB:PERIOD", min: 0.05, max: 10, step: 0.05 },
    { kind: "setter", label: "f step", channel: "OFB:F-STEP", min: 1, max: 50, step: 1 },
    { kind: "readout", label: "iteration", channel: "OFB-ITER", digits: 0 },
    { kind: "vector", label: "SV mask", channel: "OFB:SV-MASK", length: 73 },
    { kind: "stripchart", label: "corrector rms", channels: ["OFB-XRMS"], window: 120, units: "mrad" },
    { kind: "stripchart", label: "corrector mean", channels: ["OFB-XMEAN"], window: 120, units: "mrad" },
    { kind: "stripchart", label: "rf delta f", channels: ["OFB-DF"], window: 120, step: true, units: "Hz" },
    { kind: "stripchart", label: "orbit rms", channels: ["OFB-ORBIT-RMS"], window: 120, units: "mm" },
  ],
};

export const DEFAULT_PANELS: PanelConfig[] = [LIFETIME_PANEL, OPTICS_PANEL, OFB_PANEL];
