package billing;

// @PersonalData(category=email, purpose=billing)
public class Invoice {
    private String recipient;

    /* @PersonalDataHandler(purpose=billing) */
    public void send() {}
}
