/**
 * Typed client for the review-service HTTP API.
 *
 * Every mutation is retry-safe: submissions carry an idempotency key derived
 * from the assignment (candidate id + worker id), so a retry after a lost
 * response — including one caused by a page refresh mid-submit — is answered
 * with `duplicate: true` instead of creating a second record.
 */

export type Label = "entailment" | "neutral" | "contradiction";

export type AnnotationAction = "label_as_is" | "revise" | "discard";

export interface TaskView {
  candidate_id: string;
  premise: string;
  hypothesis: string;
  state: string;
  slots_taken: number;
}

export interface AnnotationPayload {
  candidate_id: string;
  worker_id: string;
  action: AnnotationAction;
  label: Label | null;
  revised_premise: string | null;
  revised_hypothesis: string | null;
  timestamp: number;
  idempotency_key: string;
}

export interface SubmitAck {
  status: string;
  duplicate: boolean;
  task_state: string;
}

/** Worker token rejected (HTTP 401): the UI should show the login prompt. */
export class AuthError extends Error {}

/** Transport failure: the UI should show the retry banner and try again. */
export class NetworkError extends Error {}

/** Same worker already annotated this candidate under a different key. */
export class DuplicateSubmissionError extends Error {}

/** The server rejected the record contents (HTTP 422). */
export class ValidationError extends Error {}

export type FetchFn = (url: string, init?: RequestInit) => Promise<Response>;

export class ReviewApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly workerId: string,
    private readonly token: string | null = null,
    private readonly fetchFn: FetchFn = (url, init) => fetch(url, init),
  ) {}

  get worker(): string {
    return this.workerId;
  }

  /** Deterministic per-assignment key: stable across page refreshes. */
  idempotencyKey(candidateId: string): string {
    return `${candidateId}:${this.workerId}`;
  }

  private headers(): Record<string, string> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (this.token !== null) {
      headers["X-Worker-Token"] = this.token;
    }
    return headers;
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    } catch (err) {
      throw new NetworkError(`request to ${path} failed: ${err}`);
    }
    if (response.status === 401) {
      throw new AuthError(`worker ${this.workerId} rejected`);
    }
    return response;
  }

  /** The next open assignment, or null when the queue is empty. */
  async fetchNext(): Promise<TaskView | null> {
    const response = await this.request(
      `/api/tasks/next?worker=${encodeURIComponent(this.workerId)}`,
      { headers: this.headers() },
    );
    if (!response.ok) {
      throw new NetworkError(`next-task request returned ${response.status}`);
    }
    const body = (await response.json()) as { task: TaskView | null };
    return body.task;
  }

  async submit(payload: AnnotationPayload): Promise<SubmitAck> {
    const response = await this.request(`/api/annotations`, {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify(payload),
    });
    if (response.status === 409) {
      throw new DuplicateSubmissionError(`already annotated ${payload.candidate_id}`);
    }
    if (response.status === 422) {
      const body = await response.json().catch(() => ({ error: "invalid record" }));
      throw new ValidationError((body as { error?: string }).error ?? "invalid record");
    }
    if (!response.ok) {
      throw new NetworkError(`submit returned ${response.status}`);
    }
    return (await response.json()) as SubmitAck;
  }

  async guidelines(): Promise<string> {
    const response = await this.request(`/api/guidelines`);
    if (!response.ok) {
      return "";
    }
    const body = (await response.json()) as { text: string };
    return body.text;
  }
}
