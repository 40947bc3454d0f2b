export interface NormalizedBox {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export interface PixelBox {
  left: number;
  top: number;
  width: number;
  height: number;
}

export interface DisplaySize {
  width: number;
  height: number;
}

export type JobState = "queued" | "running" | "done" | "failed";

export interface JobStateResponse {
  id: string;
  state: JobState;
  created_at: number;
  finished_at: number | null;
  error: string | null;
  artifacts: string[];
  request: Record<string, unknown>;
}

export interface EditRequestFields {
  inversion_prompt: string;
  editing_prompt: string;
  object_word: string;
  bbox: [number, number, number, number];
  overrides?: Record<string, unknown>;
  seed?: number;
}

export interface JobView {
  jobId: string;
  state: JobState;
  pollIntervalMs: number;
  artifactUrls: Record<string, string>;
  errorText: string | null;
}
