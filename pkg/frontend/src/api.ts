import type { EditRequestFields, JobStateResponse } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface ApiClient {
  baseUrl: string;
  fetchImpl: FetchLike;
}

export class ValidationError extends Error {
  field: string;
  constructor(field: string, message: string) {
    super(message);
    this.field = field;
  }
}

export function createClient(baseUrl: string, fetchImpl?: FetchLike): ApiClient {
  return { baseUrl: baseUrl.replace(/\/$/, ""), fetchImpl: fetchImpl ?? fetch.bind(globalThis) };
}

export async function submitJob(
  client: ApiClient,
  image: Blob,
  fields: EditRequestFields,
): Promise<{ id: string }> {
  const form = new FormData();
  form.append("image", image, "input.png");
  form.append("request", JSON.stringify(fields));
  const resp = await client.fetchImpl(`${client.baseUrl}/jobs`, { method: "POST", body: form });
  if (resp.status === 400) {
    const body = await resp.json();
    const detail = body.detail ?? {};
    throw new ValidationError(detail.field ?? "request", detail.message ?? "invalid request");
  }
  if (resp.status !== 202) {
    throw new Error(`unexpected status ${resp.status} submitting job`);
  }
  return resp.json();
}

export async function getJob(client: ApiClient, jobId: string): Promise<JobStateResponse> {
  const resp = await client.fetchImpl(`${client.baseUrl}/jobs/${encodeURIComponent(jobId)}`);
  if (resp.status === 404) throw new Error(`unknown job ${jobId}`);
  if (!resp.ok) throw new Error(`unexpected status ${resp.status} fetching job`);
  return resp.json();
}

export function artifactUrl(client: ApiClient, jobId: string, name: string): string {
  return `${client.baseUrl}/jobs/${encodeURIComponent(jobId)}/artifacts/${name}`;
}

export async function fetchArtifactText(
  client: ApiClient,
  jobId: string,
  name: string,
): Promise<string> {
  const resp = await client.fetchImpl(artifactUrl(client, jobId, name));
  if (!resp.ok) throw new Error(`artifact ${name} unavailable (${resp.status})`);
  return resp.text();
}

export interface PollOptions {
  initialMs?: number;
  maxMs?: number;
  factor?: number;
  maxNetworkRetries?: number;
  sleep?: (ms: number) => Promise<void>;
  onUpdate?: (job: JobStateResponse) => void;
  onNetworkError?: (error: Error, attempt: number) => void;
}

const defaultSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

/**
 * Poll a job with exponential backoff until it reaches a terminal state.
 * Network failures are retried (with a callback so the UI can show a banner);
 * HTTP-level errors such as 404 propagate immediately.
 */
export async function pollJob(
  client: ApiClient,
  jobId: string,
  options: PollOptions = {},
): Promise<JobStateResponse> {
  const initial = options.initialMs ?? 250;
  const max = options.maxMs ?? 4000;
  const factor = options.factor ?? 1.6;
  const maxRetries = options.maxNetworkRetries ?? 5;
  const sleep = options.sleep ?? defaultSleep;

  let interval = initial;
  let networkFailures = 0;
  for (;;) {
    let job: JobStateResponse;
    try {
      job = await getJob(client, jobId);
      networkFailures = 0;
    } catch (err) {
      const e = err as Error;
      if (e.message.startsWith("unknown job")) throw e;
      networkFailures += 1;
      options.onNetworkError?.(e, networkFailures);
      if (networkFailures > maxRetries) throw e;
      await sleep(interval);
      interval = Math.min(max, interval * factor);
      continue;
    }
    options.onUpdate?.(job);
    if (job.state === "done" || job.state === "failed") return job;
    await sleep(interval);
    interval = Math.min(max, interval * factor);
  }
}
